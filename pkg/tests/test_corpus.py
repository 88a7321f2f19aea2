import json
from collections import Counter
from dataclasses import astuple

import pytest
import torch
from hypothesis import given, settings, strategies as st

from llmdiff.corpus import (
    BOS,
    SHAPES,
    SIZE_LEVELS,
    EOS,
    PAD,
    UNK,
    Entity,
    Relation,
    SceneSpec,
    build_vocab,
    caption,
    detokenize,
    entities_disjoint,
    generate_items,
    grammar_words,
    make_item,
    parse_caption,
    read_dataset,
    relation_holds,
    render,
    sample_scene,
    scene_facts,
    tokenize,
    write_dataset,
)
from llmdiff.imageio import load_ppm, save_ppm
from llmdiff.numerics import RandomStream

RED_CIRCLE = Entity(shape="circle", color="red", cx=0.25, cy=0.5, size=0.2)
BLUE_SQUARE = Entity(shape="square", color="blue", cx=0.75, cy=0.5, size=0.2)


def test_single_entity_caption():
    scene = SceneSpec(entities=(RED_CIRCLE,))
    assert caption(scene, RandomStream(0)) == "one red circle"


def test_repeated_kinds_are_counted():
    other = Entity(shape="circle", color="red", cx=0.75, cy=0.75, size=0.1)
    scene = SceneSpec(entities=(RED_CIRCLE, other))
    assert caption(scene, RandomStream(0)) == "two red circles"


def test_relation_caption_is_either_phrasing():
    scene = SceneSpec(entities=(RED_CIRCLE, BLUE_SQUARE), relations=(Relation(0, "left_of", 1),)).validate()
    texts = {caption(scene, RandomStream(seed)) for seed in range(20)}
    assert texts <= {"one red circle left of one blue square", "one blue square right of one red circle"}
    assert len(texts) == 2


def test_relation_geometry():
    assert relation_holds(RED_CIRCLE, BLUE_SQUARE, "left_of")
    assert relation_holds(BLUE_SQUARE, RED_CIRCLE, "right_of")
    assert not relation_holds(RED_CIRCLE, BLUE_SQUARE, "above")
    with pytest.raises(ValueError):
        relation_holds(RED_CIRCLE, BLUE_SQUARE, "behind")


def test_validate_rejects_bad_scenes():
    with pytest.raises(ValueError, match="overlap"):
        SceneSpec(entities=(RED_CIRCLE, RED_CIRCLE)).validate()
    with pytest.raises(ValueError, match="inconsistent"):
        SceneSpec(entities=(RED_CIRCLE, BLUE_SQUARE), relations=(Relation(0, "right_of", 1),)).validate()
    with pytest.raises(ValueError):
        SceneSpec(entities=()).validate()


@settings(max_examples=200, deadline=None)
@given(st.integers(min_value=0, max_value=2**32))
def test_sampled_scenes_are_valid(seed):
    scene = sample_scene(RandomStream(seed))
    scene.validate()
    for a in scene.entities:
        for b in scene.entities:
            if a is not b:
                assert entities_disjoint(a, b)


@settings(max_examples=200, deadline=None)
@given(st.integers(min_value=0, max_value=2**32), st.integers(min_value=0, max_value=2**32))
def test_caption_parses_back_to_the_scene(scene_seed, caption_seed):
    scene = sample_scene(RandomStream(scene_seed))
    facts = parse_caption(caption(scene, RandomStream(caption_seed)))
    assert facts == scene_facts(scene)
    assert sum(facts.counts.values()) == len(scene.entities)


def test_parse_caption_rejects_garbage():
    with pytest.raises(ValueError):
        parse_caption("four red circles")
    with pytest.raises(ValueError):
        parse_caption("one red circle near one blue square")


def test_parse_caption_merges_groups():
    facts = parse_caption("one red circle and two red circles")
    assert facts.counts == Counter({("red", "circle"): 3})


def test_render_colors_pixels():
    image = render(SceneSpec(entities=(RED_CIRCLE,)), size=16)
    assert image.shape == (3, 16, 16)
    assert image.dtype == torch.float32
    assert torch.equal(image[:, 8, 4], torch.tensor([1.0, -1.0, -1.0]))
    assert torch.equal(image[:, 0, 15], torch.tensor([-1.0, -1.0, -1.0]))


def test_shapes_render_distinctly_at_every_size():
    center = 8.5 / 16
    renders = set()
    for shape in SHAPES:
        for size in SIZE_LEVELS:
            entity = Entity(shape=shape, color="white", cx=center, cy=center, size=size)
            renders.add(render(SceneSpec(entities=(entity,))).numpy().tobytes())
    assert len(renders) == len(SHAPES) * len(SIZE_LEVELS)


def test_smallest_circle_is_a_plus():
    image = render(SceneSpec(entities=(Entity(shape="circle", color="white", cx=8.5 / 16, cy=8.5 / 16, size=0.1),)))
    lit = image[0] > 0
    assert int(lit.sum()) == 5
    assert not bool(lit[7, 7])


@pytest.fixture(scope="module")
def sampled_scenes():
    stream = RandomStream(2024)
    return [sample_scene(stream.fork(i)) for i in range(10_000)]


def test_sampled_entity_counts_are_balanced(sampled_scenes):
    counts = Counter(len(scene.entities) for scene in sampled_scenes)
    assert set(counts) == {1, 2, 3}
    assert all(counts[n] / len(sampled_scenes) >= 0.25 for n in (1, 2, 3))


def test_sampled_scenes_never_overlap(sampled_scenes):
    for scene in sampled_scenes:
        entities = scene.entities
        assert all(entities_disjoint(a, b) for k, a in enumerate(entities) for b in entities[k + 1 :])


def test_render_is_injective_over_sampled_scenes(sampled_scenes):
    seen = {}
    for scene in sampled_scenes:
        key = tuple(sorted(astuple(e) for e in scene.entities))
        assert seen.setdefault(render(scene).numpy().tobytes(), key) == key


def test_vocab_layout():
    vocab = build_vocab()
    assert vocab.tokens[:4] == ("<pad>", "<bos>", "<eos>", "<unk>")
    assert list(vocab.tokens[4:]) == sorted(vocab.tokens[4:])
    assert (PAD, BOS, EOS, UNK) == (0, 1, 2, 3)
    assert set(grammar_words()) <= set(vocab.tokens)


def test_tokenize_round_trip():
    vocab = build_vocab()
    tokens = tokenize("one red circle above one blue square", vocab)
    assert tokens.ids[0] == BOS and tokens.ids[-1] == EOS
    assert detokenize(tokens, vocab) == "one red circle above one blue square"


def test_tokenize_edge_cases():
    vocab = build_vocab()
    assert tokenize("", vocab).ids == (BOS, EOS)
    with pytest.warns(UserWarning, match="purple"):
        tokens = tokenize("one purple circle", vocab)
    assert tokens.ids[2] == UNK


def test_items_do_not_depend_on_worker_assignment():
    stream = RandomStream(5)
    serial = generate_items(6, stream, image_size=8)
    assert [item.caption for item in serial] == [make_item(i, stream, 8).caption for i in range(6)]
    assert torch.equal(serial[3].image, make_item(3, stream, 8).image)


def test_dataset_round_trip(tmp_path):
    items = generate_items(5, RandomStream(1), image_size=8)
    write_dataset(tmp_path, items)
    loaded = read_dataset(tmp_path)
    assert [item.scene for item in loaded] == [item.scene for item in items]
    assert [item.caption for item in loaded] == [item.caption for item in items]
    assert all(torch.equal(a.image, b.image) for a, b in zip(loaded, items))


def test_dataset_files_are_byte_stable(tmp_path):
    write_dataset(tmp_path / "a", generate_items(4, RandomStream(2), image_size=8))
    write_dataset(tmp_path / "b", generate_items(4, RandomStream(2), image_size=8))
    for name in ("data.jsonl", "img_0.ppm", "img_3.ppm"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_malformed_line_is_reported(tmp_path):
    items = generate_items(2, RandomStream(3), image_size=8)
    write_dataset(tmp_path, items)
    with open(tmp_path / "data.jsonl", "a") as f:
        f.write(json.dumps({"id": 9}) + "\n")
    with pytest.raises(ValueError, match="line 3"):
        read_dataset(tmp_path)


def test_missing_files_are_reported(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_dataset(tmp_path)
    write_dataset(tmp_path, generate_items(2, RandomStream(4), image_size=8))
    (tmp_path / "img_1.ppm").unlink()
    with pytest.raises(FileNotFoundError, match="item id 1"):
        read_dataset(tmp_path)
    assert len(read_dataset(tmp_path, load_images=False)) == 2


def test_ppm_quantization(tmp_path):
    image = torch.tensor([[[-1.0, 1.0], [0.0, 3.0]]]).expand(3, 2, 2)
    save_ppm(image, tmp_path / "x.ppm")
    loaded = load_ppm(tmp_path / "x.ppm")
    assert loaded[0, 0, 0] == -1.0 and loaded[0, 0, 1] == 1.0 and loaded[0, 1, 1] == 1.0
    assert abs(float(loaded[0, 1, 0])) <= 1.0 / 127.5
