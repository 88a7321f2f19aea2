import json
import os

import torch
from tqdm import tqdm

from llmdiff.corpus import PAD, build_vocab, read_dataset, tokenize
from llmdiff.encoding import extract_encoding
from llmdiff.diffusion import ddpm_sample
from llmdiff.evalstack import AttributeClassifier, MetricModel, attribute_accuracy, build_report, siglip_score
from llmdiff.imageio import save_ppm
from llmdiff.langmodel import stack_sequences
from llmdiff.numerics import RandomStream
from llmdiff.train import load_generator, load_module, require_checkpoint, schedule_for


def condition_rows(generator, ids, streams):
    """
    Conditioning for a batch of padded ids.

    Baseline mode runs the pooled text encoder; adapter mode extracts the Langevin text
    encoding from the LM, row i using streams[i].
    """
    if "text_encoder" in generator:
        return generator["text_encoder"](ids)
    return extract_encoding(ids, generator["lm"], generator["score"], streams).c


@torch.no_grad()
def sample_batch(generator, config, ids, seeds, guidance_weight=None):
    """
    One image per (ids row, seed) pair.

    The stream of a sample is RandomStream(seed): fork 0 drives the text encoding, fork 1 the
    sampler, so a sample depends only on its caption and seed.
    """
    streams = [RandomStream(seed) for seed in seeds]
    cond = condition_rows(generator, ids, [s.fork(0) for s in streams])
    uncond = None
    if guidance_weight is not None:
        blank = torch.full_like(ids, PAD)
        uncond = condition_rows(generator, blank, [s.fork(0) for s in streams])
    size = config.data.image_size
    return ddpm_sample(
        generator["denoiser"],
        cond,
        [s.fork(1) for s in streams],
        schedule_for(config),
        (3, size, size),
        guidance_weight=guidance_weight,
        uncond=uncond,
        adapter=generator.get("adapter"),
    )


def encode_prompt(prompt, vocab, cond_len):
    tokens = tokenize(prompt.strip().lower(), vocab)
    if len(tokens) > cond_len:
        raise ValueError(f"Prompt of {len(tokens)} tokens exceeds cond_len={cond_len}")
    return stack_sequences([tokens], length=cond_len)


def sample_prompt(config, ckpt, prompt, seed, out_path, mode="adapter", guidance_weight=None):
    """Sample one image for a prompt and write it as PPM."""
    vocab = build_vocab()
    generator = load_generator(config, require_checkpoint(ckpt, "generator"), len(vocab), mode)
    ids = encode_prompt(prompt, vocab, config.data.cond_len)
    image = sample_batch(generator, config, ids, [seed], guidance_weight=guidance_weight)[0]
    out_dir = os.path.dirname(out_path)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    save_ppm(image, out_path)
    print(f"Image saved to {out_path}")
    return image


def load_judges(config, metric_ckpt, clf_ckpt, vocab_size):
    metric = MetricModel(vocab_size, image_size=config.data.image_size, dim=config.eval.embed_dim)
    load_module(metric, require_checkpoint(metric_ckpt, "metric"), "metric").eval()
    clf = AttributeClassifier(image_size=config.data.image_size)
    load_module(clf, require_checkpoint(clf_ckpt, "clf"), "clf").eval()
    return metric, clf


def run_eval(config, ckpt, testset, metric_ckpt, clf_ckpt, out_path, mode="adapter", seed=None, images_dir=None):
    """
    Sample images_per_caption images for each of the first n_captions test captions with
    seeds S..S+k-1 and score them with the metric model and the attribute classifier.

    Returns:
    - dict with siglip_mean, count_acc, color_acc, shape_acc, relation_acc and exact_match.
    """
    # Load the judges and the generator
    vocab = build_vocab()
    metric, clf = load_judges(config, metric_ckpt, clf_ckpt, len(vocab))
    generator = load_generator(config, require_checkpoint(ckpt, "generator"), len(vocab), mode)
    print(f"Loading test captions from {testset}...")
    items = read_dataset(testset, load_images=False)[: config.eval.n_captions]
    if not items:
        raise ValueError(f"Test set {testset} is empty")
    base_seed = config.seeds.eval if seed is None else seed
    seeds = [base_seed + k for k in range(config.eval.images_per_caption)]
    if images_dir:
        os.makedirs(images_dir, exist_ok=True)

    # Sample every caption with the same seeds
    images, id_rows, scenes = [], [], []
    for item in tqdm(items, desc=f"Sampling ({mode})"):
        ids = encode_prompt(item.caption, vocab, config.data.cond_len).expand(len(seeds), -1)
        batch = sample_batch(generator, config, ids, seeds, guidance_weight=config.diffusion.guidance_weight)
        if images_dir:
            for seed_value, image in zip(seeds, batch):
                save_ppm(image, os.path.join(images_dir, f"img_{item.id}_{seed_value}.ppm"))
        images.append(batch.to(torch.float32))
        id_rows.append(ids)
        scenes.extend([item.scene] * len(seeds))

    # Score the samples against the scenes their captions describe
    images = torch.cat(images).clamp(-1.0, 1.0)
    scores = siglip_score(images, torch.cat(id_rows), metric)
    report = build_report(scores, attribute_accuracy(images, scenes, clf, config.eval.clf_min_accuracy))
    # Save the report
    out_dir = os.path.dirname(out_path)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    with open(out_path, "w") as f:
        json.dump(report, f, indent=2)
        f.write("\n")
    print(f"Report saved to {out_path}")
    for key, value in report.items():
        print(f"  {key}: {value:.4f}")
    return report
