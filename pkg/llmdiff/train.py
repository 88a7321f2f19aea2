import json
import os
import time

import torch
from tqdm import tqdm

from llmdiff.adapter import count_parameters, init_adapter, train_adapter_step, trainable_parameters
from llmdiff.checkpoint import load_checkpoint, save_checkpoint, strip_prefix, with_prefix
from llmdiff.config import write_resolved_config
from llmdiff.corpus import EOS, PAD, build_vocab, detokenize, read_dataset, tokenize
from llmdiff.diffusion import DenoiserNet, PooledTextEncoder, make_schedule, train_diffusion_step
from llmdiff.encoding import ScoreParams
from llmdiff.evalstack import AttributeClassifier, MetricModel, scene_labels, train_classifier_step, train_metric_step, validate_classifier
from llmdiff.langmodel import LangModel, LMConfig, TokenSequence, stack_sequences, train_lm_step
from llmdiff.numerics import RandomStream, resolve_dtype, set_frozen, uniform_ints

CHECKPOINT_NAME = "checkpoint.llmd"
METRICS_NAME = "metrics.jsonl"

# stream ids separating the phases that share a seed value
PHASE_STREAMS = {"lm": 11, "base": 12, "adapter": 13, "metric": 14, "clf": 15}


class MetricsLog:
    """Append-only JSON Lines log with one object per logged step."""

    def __init__(self, filepath, log_wall_time=False):
        self.filepath = filepath
        self.log_wall_time = log_wall_time
        self.start = time.perf_counter()

    def write(self, step, metrics):
        record = {"step": step, "loss": metrics["loss"], "grad_norm": metrics["grad_norm"]}
        if self.log_wall_time:
            record["wall_ms"] = round(1000.0 * (time.perf_counter() - self.start), 3)
        with open(self.filepath, "a") as f:
            f.write(json.dumps(record) + "\n")


def prepare_run_dir(config, out_dir, force=False, resume=False):
    """
    Create a run directory, refusing to overwrite an existing run unless forced or resumed.
    """
    existing = [name for name in (CHECKPOINT_NAME, METRICS_NAME) if os.path.exists(os.path.join(out_dir, name))]
    if existing and not (force or resume):
        raise RuntimeError(f"Run directory {out_dir} already holds {', '.join(existing)}; pass --force to overwrite")
    os.makedirs(out_dir, exist_ok=True)
    if force and not resume:
        for name in existing:
            os.remove(os.path.join(out_dir, name))
    write_resolved_config(config, out_dir)
    return os.path.join(out_dir, CHECKPOINT_NAME), os.path.join(out_dir, METRICS_NAME)


def require_checkpoint(filepath, what):
    if filepath is None or not os.path.exists(filepath):
        raise RuntimeError(f"Missing prerequisite {what} checkpoint: {filepath}")
    return load_checkpoint(filepath)


def optimizer_tensors(optimizer, named_params):
    """AdamW moments as checkpoint entries optim.<param>.exp_avg|exp_avg_sq|step."""
    tensors = {}
    for name, param in named_params.items():
        state = optimizer.state.get(param)
        if not state:
            continue
        tensors[f"optim.{name}.exp_avg"] = state["exp_avg"]
        tensors[f"optim.{name}.exp_avg_sq"] = state["exp_avg_sq"]
        tensors[f"optim.{name}.step"] = torch.as_tensor(state["step"], dtype=torch.float32).reshape(())
    return tensors


def load_optimizer_tensors(optimizer, named_params, tensors):
    for name, param in named_params.items():
        prefix = f"optim.{name}."
        if prefix + "step" not in tensors:
            continue
        optimizer.state[param] = {
            "step": tensors[prefix + "step"].clone().to(torch.float32),
            "exp_avg": tensors[prefix + "exp_avg"].clone().to(param.dtype),
            "exp_avg_sq": tensors[prefix + "exp_avg_sq"].clone().to(param.dtype),
        }


def named_for_checkpoint(modules):
    """{prefix: module} -> {'prefix.param': parameter} for trainable parameters."""
    return {f"{prefix}.{name}": p for prefix, module in modules.items() for name, p in module.named_parameters() if p.requires_grad}


def module_tensors(modules):
    tensors = {}
    for prefix, module in modules.items():
        tensors.update(with_prefix(module.state_dict(), prefix))
    return tensors


def load_module(module, tensors, prefix):
    state = strip_prefix(tensors, prefix)
    if not state:
        raise ValueError(f"Checkpoint holds no '{prefix}' tensors")
    module.load_state_dict(state)
    return module


def write_training_checkpoint(filepath, modules, optimizer, named_params, step):
    tensors = module_tensors(modules)
    tensors.update(optimizer_tensors(optimizer, named_params))
    tensors["train.step"] = torch.tensor(float(step), dtype=torch.float64)
    save_checkpoint(tensors, filepath)
    print(f"Checkpoint saved to {filepath}")


def resume_state(filepath, modules, optimizer, named_params):
    tensors = require_checkpoint(filepath, "resume")
    for prefix, module in modules.items():
        load_module(module, tensors, prefix)
    load_optimizer_tensors(optimizer, named_params, tensors)
    step = int(tensors["train.step"])
    print(f"Resuming from step {step}")
    return step


def run_loop(desc, start, steps, log_every, step_fn, log):
    """Call step_fn(step) for step in start..steps-1, logging every log_every steps and the last one."""
    metrics = None
    for step in tqdm(range(start, steps), desc=desc, initial=start, total=steps):
        metrics = step_fn(step)
        if step % log_every == 0 or step == steps - 1:
            log.write(step, metrics)
    return metrics


def load_captions(data_dir, vocab, cond_len=None, load_images=True):
    items = read_dataset(data_dir, load_images=load_images)
    if not items:
        raise ValueError(f"Dataset {data_dir} is empty")
    sequences = [tokenize(item.caption, vocab) for item in items]
    images = torch.stack([item.image for item in items]) if load_images else None
    ids = stack_sequences(sequences, length=cond_len, pad_id=PAD) if cond_len else None
    return items, sequences, images, ids


def batch_indices(stream, step, n_items, batch_size):
    return torch.as_tensor(uniform_ints(stream.at(step).fork(0), n_items, batch_size), dtype=torch.long)


# ---------------------------------------------------------------------------
# model builders shared by training, sampling and evaluation


def build_lm(config, vocab_size):
    return LangModel(LMConfig.from_section(config.lm, vocab_size))


def build_denoiser(config):
    d = config.diffusion
    model = DenoiserNet(in_channels=3, channels=tuple(d.channels), cond_dim=d.cond_dim, attn_heads=d.attn_heads)
    return model.to(resolve_dtype(d.dtype))


def build_text_encoder(config, vocab_size):
    d = config.diffusion
    return PooledTextEncoder(vocab_size, config.data.cond_len, d.cond_dim).to(resolve_dtype(d.dtype))


def schedule_for(config):
    d = config.diffusion
    return make_schedule(d.n_steps, d.beta_start, d.beta_end)


def load_generator(config, tensors, vocab_size, mode):
    """
    Rebuild the sampling path stored in a checkpoint.

    Returns a dict with "denoiser" and, for mode "baseline", "text_encoder"; for mode
    "adapter", "lm", "score" and "adapter".
    """
    denoiser = load_module(build_denoiser(config), tensors, "denoiser").eval()
    if mode == "baseline":
        return {"denoiser": denoiser, "text_encoder": load_module(build_text_encoder(config, vocab_size), tensors, "text_encoder").eval()}
    if mode != "adapter":
        raise ValueError(f"Unknown sampling mode '{mode}'")
    lm = load_module(build_lm(config, vocab_size), tensors, "lm").eval()
    score = load_module(ScoreParams(lm.n_blocks, dtype=lm.tok_emb.weight.dtype), tensors, "score")
    adapter = init_adapter(denoiser, config.lm.hidden, init_a2=config.adapter.init_a2).load_tensors(tensors)
    return {"denoiser": denoiser, "lm": lm, "score": score, "adapter": adapter}


# ---------------------------------------------------------------------------
# phases


def greedy_caption(model, vocab, prefix="one"):
    """Greedily continue a caption prefix up to <eos> or the model's max_len."""
    prompt = TokenSequence(tokenize(prefix, vocab).ids[:-1])
    continued = model.greedy_continue(prompt, model.config.max_len - len(prompt), eos_id=EOS)
    return detokenize(continued, vocab)


def train_lm(config, data_dir, out_dir, force=False, resume=False):
    """Pretrain the decoder-only controller LM on the corpus captions."""
    ckpt_path, metrics_path = prepare_run_dir(config, out_dir, force=force, resume=resume)
    vocab = build_vocab()
    print(f"Loading captions from {data_dir}...")
    _, sequences, _, _ = load_captions(data_dir, vocab, load_images=False)

    # Build the model and restore its optimizer state when resuming
    torch.manual_seed(config.seeds.lm)
    model = build_lm(config, len(vocab))
    optimizer = torch.optim.AdamW(model.parameters(), lr=config.lm.lr, weight_decay=config.lm.weight_decay)
    modules = {"lm": model}
    named = named_for_checkpoint(modules)
    start = resume_state(ckpt_path, modules, optimizer, named) if resume else 0
    stream = RandomStream(config.seeds.lm, PHASE_STREAMS["lm"])

    def step_fn(step):
        idx = batch_indices(stream, step, len(sequences), config.lm.batch_size)
        return train_lm_step(model, optimizer, [sequences[i] for i in idx.tolist()])

    print(f"Training language model with {count_parameters(model)} parameters...")
    run_loop("train-lm", start, config.lm.steps, config.lm.log_every, step_fn, MetricsLog(metrics_path, config.seeds.log_wall_time))
    write_training_checkpoint(ckpt_path, modules, optimizer, named, config.lm.steps)

    # Sanity check the trained controller on a caption prefix
    print(f"Greedy continuation of 'one': {greedy_caption(model, vocab)}")
    return ckpt_path


def drop_conditions(ids, stream, drop_prob):
    """Replace whole rows by <pad> with probability drop_prob (one decision per row)."""
    draws = torch.as_tensor(stream.generator().random(ids.shape[0]))
    return torch.where((draws < drop_prob)[:, None], torch.full_like(ids, PAD), ids)


def train_base(config, data_dir, out_dir, force=False, resume=False):
    """Pretrain the baseline diffusion backbone with the pooled trainable text encoder."""
    ckpt_path, metrics_path = prepare_run_dir(config, out_dir, force=force, resume=resume)
    vocab = build_vocab()
    print(f"Loading dataset from {data_dir}...")
    _, _, images, ids = load_captions(data_dir, vocab, cond_len=config.data.cond_len)

    torch.manual_seed(config.seeds.diffusion)
    denoiser = build_denoiser(config)
    text_encoder = build_text_encoder(config, len(vocab))
    images = images.to(resolve_dtype(config.diffusion.dtype))
    modules = {"denoiser": denoiser, "text_encoder": text_encoder}
    named = named_for_checkpoint(modules)
    optimizer = torch.optim.AdamW(named.values(), lr=config.diffusion.lr, weight_decay=config.diffusion.weight_decay)
    start = resume_state(ckpt_path, modules, optimizer, named) if resume else 0
    sched = schedule_for(config)
    stream = RandomStream(config.seeds.diffusion, PHASE_STREAMS["base"])

    def step_fn(step):
        idx = batch_indices(stream, step, images.shape[0], config.diffusion.batch_size)
        step_stream = stream.at(step)
        # Whole rows are replaced by <pad> with cond_drop_prob
        cond_ids = drop_conditions(ids[idx], step_stream.fork(2), config.diffusion.cond_drop_prob)
        return train_diffusion_step(
            denoiser, optimizer, images[idx], text_encoder(cond_ids), step_stream.fork(1), sched, parameters=list(named.values())
        )

    print(f"Training diffusion backbone with {count_parameters(denoiser)} + {count_parameters(text_encoder)} parameters...")
    run_loop(
        "train-base", start, config.diffusion.steps, config.diffusion.log_every, step_fn, MetricsLog(metrics_path, config.seeds.log_wall_time)
    )
    write_training_checkpoint(ckpt_path, modules, optimizer, named, config.diffusion.steps)
    return ckpt_path


def train_adapter(config, data_dir, lm_ckpt, base_ckpt, out_dir, force=False, resume=False):
    """
    Train the adapter and the score scales with the LM and the diffusion backbone frozen.

    The output checkpoint also carries the frozen lm/denoiser/text_encoder tensors so that it
    can drive both sampling modes on its own.
    """
    lm_tensors = require_checkpoint(lm_ckpt, "lm")
    base_tensors = require_checkpoint(base_ckpt, "base")
    ckpt_path, metrics_path = prepare_run_dir(config, out_dir, force=force, resume=resume)
    vocab = build_vocab()
    print(f"Loading dataset from {data_dir}...")
    _, _, images, ids = load_captions(data_dir, vocab, cond_len=config.data.cond_len)

    # Freeze the pretrained LM, backbone and baseline text encoder
    lm = set_frozen(load_module(build_lm(config, len(vocab)), lm_tensors, "lm"))
    denoiser = set_frozen(load_module(build_denoiser(config), base_tensors, "denoiser"))
    text_encoder = set_frozen(load_module(build_text_encoder(config, len(vocab)), base_tensors, "text_encoder"))
    images = images.to(resolve_dtype(config.diffusion.dtype))

    score = ScoreParams(lm.n_blocks, dtype=lm.tok_emb.weight.dtype)
    adapter = init_adapter(denoiser, config.lm.hidden, init_a2=config.adapter.init_a2, seed=config.seeds.adapter)
    trainable = trainable_parameters(adapter, score)
    optimizer = torch.optim.AdamW(trainable.values(), lr=config.adapter.lr, weight_decay=config.adapter.weight_decay)
    modules = {"lm": lm, "denoiser": denoiser, "text_encoder": text_encoder, "score": score}

    if resume:
        tensors = require_checkpoint(ckpt_path, "resume")
        load_module(score, tensors, "score")
        adapter.load_tensors(tensors)
        load_optimizer_tensors(optimizer, trainable, tensors)
        start = int(tensors["train.step"])
        print(f"Resuming from step {start}")
    else:
        start = 0

    frozen = count_parameters(lm) + count_parameters(denoiser) + count_parameters(text_encoder)
    print(f"Adapter: {count_parameters(trainable.values())} trainable parameters, {frozen} frozen")
    sched = schedule_for(config)
    stream = RandomStream(config.seeds.adapter, PHASE_STREAMS["adapter"])
    updated = set()

    def step_fn(step):
        idx = batch_indices(stream, step, images.shape[0], config.adapter.batch_size)
        metrics = train_adapter_step(images[idx], ids[idx], lm, score, adapter, denoiser, optimizer, stream.at(step).fork(1), sched)
        updated.update(metrics["updated"])
        return metrics

    run_loop("train-adapter", start, config.adapter.steps, config.adapter.log_every, step_fn, MetricsLog(metrics_path, config.seeds.log_wall_time))
    if updated:
        print(f"{len(updated)} trainable tensors received gradients")
    # Bundle the frozen modules with the adapter so one checkpoint drives both modes
    tensors = module_tensors(modules)
    tensors.update(adapter.tensors())
    tensors.update(optimizer_tensors(optimizer, trainable))
    tensors["train.step"] = torch.tensor(float(config.adapter.steps), dtype=torch.float64)
    save_checkpoint(tensors, ckpt_path)
    print(f"Checkpoint saved to {ckpt_path}")
    return ckpt_path


def train_metric(config, data_dir, out_dir, force=False, resume=False):
    """Train the contrastive image-text metric on ground-truth renders only."""
    ckpt_path, metrics_path = prepare_run_dir(config, out_dir, force=force, resume=resume)
    vocab = build_vocab()
    print(f"Loading dataset from {data_dir}...")
    _, _, images, ids = load_captions(data_dir, vocab, cond_len=config.data.cond_len)

    torch.manual_seed(config.seeds.metric)
    metric = MetricModel(len(vocab), image_size=config.data.image_size, dim=config.eval.embed_dim)
    modules = {"metric": metric}
    named = named_for_checkpoint(modules)
    optimizer = torch.optim.AdamW(metric.parameters(), lr=config.eval.metric_lr)
    start = resume_state(ckpt_path, modules, optimizer, named) if resume else 0
    stream = RandomStream(config.seeds.metric, PHASE_STREAMS["metric"])

    def step_fn(step):
        idx = batch_indices(stream, step, images.shape[0], config.eval.metric_batch)
        return train_metric_step(metric, optimizer, images[idx], ids[idx])

    run_loop("train-metric", start, config.eval.metric_steps, 100, step_fn, MetricsLog(metrics_path, config.seeds.log_wall_time))
    print(f"Learned alpha={float(metric.alpha):.4f}, beta={float(metric.beta):.4f}")
    write_training_checkpoint(ckpt_path, modules, optimizer, named, config.eval.metric_steps)
    return ckpt_path


def train_clf(config, data_dir, out_dir, force=False, resume=False):
    """Train the attribute classifier, holding out the last clf_holdout renders for validation."""
    ckpt_path, metrics_path = prepare_run_dir(config, out_dir, force=force, resume=resume)
    vocab = build_vocab()
    print(f"Loading dataset from {data_dir}...")
    items, _, images, _ = load_captions(data_dir, vocab)
    holdout = min(config.eval.clf_holdout, len(items) // 5)
    split = len(items) - holdout
    if split < 1 or holdout < 1:
        raise ValueError(f"Dataset of {len(items)} items is too small to hold out a validation split")
    labels = scene_labels([item.scene for item in items[:split]])

    torch.manual_seed(config.seeds.clf)
    clf = AttributeClassifier(image_size=config.data.image_size)
    modules = {"clf": clf}
    named = named_for_checkpoint(modules)
    optimizer = torch.optim.AdamW(clf.parameters(), lr=config.eval.clf_lr)
    start = resume_state(ckpt_path, modules, optimizer, named) if resume else 0
    stream = RandomStream(config.seeds.clf, PHASE_STREAMS["clf"])

    def step_fn(step):
        idx = batch_indices(stream, step, split, config.eval.clf_batch)
        batch_labels = {key: value[idx.numpy()] for key, value in labels.items()}
        return train_classifier_step(clf, optimizer, images[idx], batch_labels)

    run_loop("train-clf", start, config.eval.clf_steps, 100, step_fn, MetricsLog(metrics_path, config.seeds.log_wall_time))
    # Validate on the held-out renders
    clf.eval()
    accuracy = validate_classifier(clf, images[split:], [item.scene for item in items[split:]])
    print(f"Validation exact-match accuracy on {holdout} held-out renders: {accuracy:.4f}")
    if accuracy < config.eval.clf_min_accuracy:
        print(f"Warning: below the {config.eval.clf_min_accuracy} required for evaluation")
    write_training_checkpoint(ckpt_path, modules, optimizer, named, config.eval.clf_steps)
    return ckpt_path
