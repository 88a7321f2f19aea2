import glob
import json
import math
import os
import warnings
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from tqdm import tqdm

from llmdiff.imageio import load_ppm, save_ppm
from llmdiff.langmodel import TokenSequence

SHAPES = ("circle", "square", "triangle")
PLURAL = {"circle": "circles", "square": "squares", "triangle": "triangles"}
COLORS = ("red", "green", "blue", "yellow", "white")
RELATIONS = ("left_of", "right_of", "above", "below")
RELATION_WORDS = {
    "left_of": ("left", "of"),
    "right_of": ("right", "of"),
    "above": ("above",),
    "below": ("below",),
}
CONVERSE = {"left_of": "right_of", "right_of": "left_of", "above": "below", "below": "above"}
NUMBER_WORDS = ("one", "two", "three")

# Colors as RGB in [-1, 1] on a -1 (black) background.
COLOR_RGB = {
    "red": (1.0, -1.0, -1.0),
    "green": (-1.0, 1.0, -1.0),
    "blue": (-1.0, -1.0, 1.0),
    "yellow": (1.0, 1.0, -1.0),
    "white": (1.0, 1.0, 1.0),
}

SIZE_LEVELS = (0.1, 0.2, 0.3)
GRID = 16
RELATION_MARGIN = 0.15
MAX_PLACEMENT_TRIES = 1000
# Circles are drawn at 0.85 of the entity size so the smallest one is a plus, never a 3x3 block.
CIRCLE_SCALE = 0.85

SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")
PAD, BOS, EOS, UNK = range(4)


@dataclass(frozen=True)
class Entity:
    shape: str
    color: str
    cx: float
    cy: float
    size: float

    @property
    def kind(self):
        return (self.color, self.shape)


@dataclass(frozen=True)
class Relation:
    subject: int
    relation: str
    object: int


@dataclass(frozen=True)
class SceneSpec:
    entities: tuple
    relations: tuple = ()

    def to_dict(self):
        return {
            "entities": [asdict(e) for e in self.entities],
            "relations": [asdict(r) for r in self.relations],
        }

    @classmethod
    def from_dict(cls, values):
        return cls(
            entities=tuple(Entity(**e) for e in values["entities"]),
            relations=tuple(Relation(**r) for r in values["relations"]),
        )

    def validate(self):
        if not 1 <= len(self.entities) <= 3:
            raise ValueError(f"A scene holds 1-3 entities, got {len(self.entities)}")
        for e in self.entities:
            if e.shape not in SHAPES or e.color not in COLORS:
                raise ValueError(f"Unknown entity attributes {e.color} {e.shape}")
            if not 0.1 <= e.size <= 0.3:
                raise ValueError(f"Entity size {e.size} outside [0.1, 0.3]")
        for i, a in enumerate(self.entities):
            for b in self.entities[i + 1 :]:
                if not entities_disjoint(a, b):
                    raise ValueError("Scene entities overlap")
        for r in self.relations:
            if not relation_holds(self.entities[r.subject], self.entities[r.object], r.relation):
                raise ValueError(f"Relation {r.relation} inconsistent with coordinates")
        return self


def entities_disjoint(a, b):
    return math.hypot(a.cx - b.cx, a.cy - b.cy) > a.size + b.size


def relation_holds(subject, obj, relation):
    """Image y grows downwards, so 'above' means a smaller cy."""
    if relation == "left_of":
        return subject.cx < obj.cx - RELATION_MARGIN
    if relation == "right_of":
        return subject.cx > obj.cx + RELATION_MARGIN
    if relation == "above":
        return subject.cy < obj.cy - RELATION_MARGIN
    if relation == "below":
        return subject.cy > obj.cy + RELATION_MARGIN
    raise ValueError(f"Unknown relation '{relation}'")


def _grid_coordinate(rng, size):
    lo = math.ceil(GRID * size - 0.5)
    hi = math.floor(GRID * (1.0 - size) - 0.5)
    return (int(rng.integers(lo, hi + 1)) + 0.5) / GRID


def sample_scene(stream):
    """
    Sample 1-3 entities on the pixel grid, optionally with one relation between two
    differently-attributed entities, rejection-sampling placements until the scene is valid.
    """
    rng = stream.generator()
    n = int(rng.integers(1, 4))
    kinds = [(SHAPES[rng.integers(len(SHAPES))], COLORS[rng.integers(len(COLORS))]) for _ in range(n)]
    pairs = [(i, j) for i in range(n) for j in range(n) if i != j and kinds[i] != kinds[j]]
    relation = None
    if pairs and rng.random() < 0.5:
        i, j = pairs[rng.integers(len(pairs))]
        relation = Relation(subject=i, relation=RELATIONS[rng.integers(len(RELATIONS))], object=j)

    for _ in range(MAX_PLACEMENT_TRIES):
        entities = []
        for shape, color in kinds:
            size = float(SIZE_LEVELS[rng.integers(len(SIZE_LEVELS))])
            entities.append(
                Entity(shape=shape, color=color, cx=_grid_coordinate(rng, size), cy=_grid_coordinate(rng, size), size=size)
            )
        if any(not entities_disjoint(a, b) for k, a in enumerate(entities) for b in entities[k + 1 :]):
            continue
        if relation and not relation_holds(entities[relation.subject], entities[relation.object], relation.relation):
            continue
        return SceneSpec(entities=tuple(entities), relations=(relation,) if relation else ())
    raise ValueError("scene sampling stuck")


def shape_mask(entity, xs, ys):
    dx, dy = xs - entity.cx, ys - entity.cy
    if entity.shape == "circle":
        return dx**2 + dy**2 <= (CIRCLE_SCALE * entity.size) ** 2
    if entity.shape == "square":
        half = entity.size / math.sqrt(2.0)
        return np.maximum(np.abs(dx), np.abs(dy)) <= half
    # Upward triangle inscribed in the entity's bounding circle.
    return (dy >= -entity.size) & (dy <= entity.size / 2) & (math.sqrt(3.0) * np.abs(dx) <= dy + entity.size)


def render(scene, size=16):
    """Rasterize the entities (relations are not drawn) into a [-1, 1] Tensor[3, size, size]."""
    coords = (np.arange(size) + 0.5) / size
    xs, ys = np.meshgrid(coords, coords)
    image = np.full((3, size, size), -1.0, dtype=np.float32)
    for entity in scene.entities:
        mask = shape_mask(entity, xs, ys)
        image[:, mask] = np.array(COLOR_RGB[entity.color], dtype=np.float32)[:, None]
    return torch.from_numpy(image)


def _group_phrase(count, color, shape):
    noun = shape if count == 1 else PLURAL[shape]
    return f"{NUMBER_WORDS[count - 1]} {color} {noun}"


def caption(scene, stream):
    """
    Describe the scene with the closed grammar

        caption := clause ("and" clause)*
        clause  := group [relation group]
        group   := number color shape

    The only randomness is whether a relation is phrased from its subject or its object,
    and the clause order.
    """
    rng = stream.generator()
    clauses, described = [], set()
    for rel in scene.relations:
        subject, obj = scene.entities[rel.subject], scene.entities[rel.object]
        relation = rel.relation
        if rng.random() < 0.5:
            subject, obj, relation = obj, subject, CONVERSE[relation]
        words = " ".join(RELATION_WORDS[relation])
        clauses.append(f"{_group_phrase(1, subject.color, subject.shape)} {words} {_group_phrase(1, obj.color, obj.shape)}")
        described.update({rel.subject, rel.object})

    remaining = Counter(e.kind for k, e in enumerate(scene.entities) if k not in described)
    for (color, shape), count in remaining.items():
        clauses.append(_group_phrase(count, color, shape))
    order = rng.permutation(len(clauses))
    return " and ".join(clauses[i] for i in order)


@dataclass
class CaptionFacts:
    """Attribute multiset and stated relations recovered from a caption or a scene."""

    counts: Counter = field(default_factory=Counter)
    relations: list = field(default_factory=list)

    def __eq__(self, other):
        return self.counts == other.counts and sorted(self.relations) == sorted(other.relations)


def _canonical_relation(subject_kind, relation, object_kind):
    if relation in ("right_of", "below"):
        return (object_kind, CONVERSE[relation], subject_kind)
    return (subject_kind, relation, object_kind)


def scene_facts(scene):
    facts = CaptionFacts(counts=Counter(e.kind for e in scene.entities))
    for rel in scene.relations:
        facts.relations.append(
            _canonical_relation(scene.entities[rel.subject].kind, rel.relation, scene.entities[rel.object].kind)
        )
    return facts


def _parse_group(words):
    if len(words) != 3 or words[0] not in NUMBER_WORDS or words[1] not in COLORS:
        raise ValueError(f"Cannot parse group '{' '.join(words)}'")
    count = NUMBER_WORDS.index(words[0]) + 1
    shape = words[2] if count == 1 else next((s for s, p in PLURAL.items() if p == words[2]), None)
    if shape not in SHAPES:
        raise ValueError(f"Cannot parse group '{' '.join(words)}'")
    return count, (words[1], shape)


def parse_caption(text):
    """Recover the attribute multiset and relations a grammar caption describes."""
    facts = CaptionFacts()
    words = text.split()
    clauses, current = [], []
    for word in words:
        if word == "and":
            clauses.append(current)
            current = []
        else:
            current.append(word)
    clauses.append(current)
    for clause in clauses:
        if len(clause) == 3:
            count, kind = _parse_group(clause)
            facts.counts[kind] += count
            continue
        for relation, relation_words in RELATION_WORDS.items():
            n = len(relation_words)
            if len(clause) == 6 + n and tuple(clause[3 : 3 + n]) == relation_words:
                _, subject_kind = _parse_group(clause[:3])
                _, object_kind = _parse_group(clause[3 + n :])
                facts.counts[subject_kind] += 1
                facts.counts[object_kind] += 1
                facts.relations.append(_canonical_relation(subject_kind, relation, object_kind))
                break
        else:
            raise ValueError(f"Cannot parse clause '{' '.join(clause)}'")
    return facts


def grammar_words():
    words = set(COLORS) | set(SHAPES) | set(PLURAL.values()) | set(NUMBER_WORDS) | {"and"}
    for relation_words in RELATION_WORDS.values():
        words.update(relation_words)
    return sorted(words)


@dataclass
class Vocab:
    tokens: tuple

    def __post_init__(self):
        self.ids = {token: i for i, token in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def id(self, token):
        return self.ids.get(token, UNK)


def build_vocab():
    """<pad>=0, <bos>=1, <eos>=2, <unk>=3, then the grammar words in lexicographic order."""
    return Vocab(tokens=SPECIAL_TOKENS + tuple(grammar_words()))


def tokenize(text, vocab):
    """<bos> + word ids + <eos>; unknown words map to <unk> with a warning."""
    words = text.split()
    unknown = [w for w in words if w not in vocab.ids]
    if unknown:
        warnings.warn(f"Unknown words mapped to <unk>: {', '.join(unknown)}")
    return TokenSequence((BOS,) + tuple(vocab.id(w) for w in words) + (EOS,))


def detokenize(tokens, vocab):
    return " ".join(vocab.tokens[i] for i in tokens.ids if i not in (PAD, BOS, EOS))


@dataclass
class DatasetItem:
    id: int
    scene: SceneSpec
    caption: str
    image: torch.Tensor = None

    def to_record(self):
        return {"id": self.id, **self.scene.to_dict(), "caption": self.caption}


def make_item(index, stream, image_size):
    """Build item `index` from its own forked stream so work assignment cannot change it."""
    item_stream = stream.fork(index)
    scene = sample_scene(item_stream.fork(0))
    text = caption(scene, item_stream.fork(1))
    return DatasetItem(id=index, scene=scene, caption=text, image=render(scene, image_size))


def _make_chunk(args):
    indices, stream, image_size = args
    return [make_item(i, stream, image_size) for i in indices]


def generate_items(n_items, stream, image_size=16, workers=1):
    """Generate n_items dataset items, optionally fanned out over a process pool."""
    if workers <= 1:
        return [make_item(i, stream, image_size) for i in tqdm(range(n_items), desc="Generating scenes")]
    chunks = [(list(range(start, min(start + 256, n_items))), stream, image_size) for start in range(0, n_items, 256)]
    items = []
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for chunk in tqdm(pool.map(_make_chunk, chunks), total=len(chunks), desc="Generating scenes"):
            items.extend(chunk)
    return items


def prepare_dataset_dir(out_dir, force=False):
    """Refuse to overwrite an existing dataset unless forced; a forced run clears the old files first."""
    path = os.path.join(out_dir, "data.jsonl")
    if not os.path.exists(path):
        return
    if not force:
        raise RuntimeError(f"Dataset directory {out_dir} already holds data.jsonl; pass --force to overwrite")
    for stale in [path] + glob.glob(os.path.join(out_dir, "img_*.ppm")):
        os.remove(stale)


def write_dataset(out_dir, items):
    """
    Write items as JSON Lines (data.jsonl) plus one PPM per item (img_{id}.ppm).

    Args:
    - out_dir: destination directory (created if missing).
    - items: list of DatasetItem with rendered images.
    """
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "data.jsonl"), "w") as f:
        for item in items:
            f.write(json.dumps(item.to_record()) + "\n")
    for item in items:
        save_ppm(item.image, os.path.join(out_dir, f"img_{item.id}.ppm"))
    print(f"Dataset of {len(items)} items saved to {out_dir}")


def read_dataset(data_dir, load_images=True):
    """Exact inverse of write_dataset."""
    path = os.path.join(data_dir, "data.jsonl")
    if not os.path.exists(path):
        raise FileNotFoundError(f"Dataset file {path} does not exist.")
    items = []
    with open(path, "r") as f:
        for line_number, line in enumerate(f, start=1):
            try:
                record = json.loads(line)
                item = DatasetItem(id=record["id"], scene=SceneSpec.from_dict(record), caption=record["caption"])
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise ValueError(f"Malformed dataset line {line_number} in {path}: {e}")
            if load_images:
                image_path = os.path.join(data_dir, f"img_{item.id}.ppm")
                if not os.path.exists(image_path):
                    raise FileNotFoundError(f"Missing image file for item id {item.id}: {image_path}")
                item.image = load_ppm(image_path)
            items.append(item)
    return items
