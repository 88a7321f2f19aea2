import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.metrics import accuracy_score

from llmdiff.corpus import COLORS, PAD, SHAPES, relation_holds
from llmdiff.numerics import optimizer_step

REPORT_KEYS = ("siglip_mean", "count_acc", "color_acc", "shape_acc", "relation_acc", "exact_match")
PRESENCE_THRESHOLD = 0.5

# right_of and below are judged through the mirrored left_of and above head.
CANONICAL_RELATIONS = {
    "left_of": ("left_of", False),
    "right_of": ("left_of", True),
    "above": ("above", False),
    "below": ("above", True),
}
KINDS = tuple((color, shape) for color in COLORS for shape in SHAPES)
RELATION_KEYS = tuple(
    (relation, subject, obj) for relation in ("left_of", "above") for subject in KINDS for obj in KINDS if subject != obj
)
RELATION_INDEX = {key: k for k, key in enumerate(RELATION_KEYS)}


def _conv_trunk(width):
    return nn.Sequential(
        nn.Conv2d(3, width, 3, padding=1),
        nn.SiLU(),
        nn.Conv2d(width, 2 * width, 3, stride=2, padding=1),
        nn.SiLU(),
        nn.Conv2d(2 * width, 2 * width, 3, stride=2, padding=1),
        nn.SiLU(),
        nn.Flatten(),
    )


class MetricModel(nn.Module):
    """
    Toy contrastive image-text model.

    f_img is a small convnet, f_text mean-pools token embeddings over non-pad positions;
    both end in a linear projection to unit-norm vectors. alpha and beta are trainable.
    """

    def __init__(self, vocab_size, image_size=16, dim=64, width=32):
        super().__init__()
        self.image_trunk = _conv_trunk(width)
        self.image_proj = nn.Linear(2 * width * (image_size // 4) ** 2, dim)
        self.tok_emb = nn.Embedding(vocab_size, dim, padding_idx=PAD)
        self.text_proj = nn.Linear(dim, dim)
        self.alpha = nn.Parameter(torch.tensor(10.0))
        self.beta = nn.Parameter(torch.tensor(-10.0))

    def f_img(self, images):
        return F.normalize(self.image_proj(self.image_trunk(images)), dim=-1)

    def f_text(self, ids):
        keep = (ids != PAD).unsqueeze(-1).to(self.tok_emb.weight.dtype)
        pooled = (self.tok_emb(ids) * keep).sum(dim=-2) / keep.sum(dim=-2).clamp(min=1.0)
        return F.normalize(self.text_proj(pooled), dim=-1)

    def cosine_matrix(self, images, ids):
        return self.f_img(images) @ self.f_text(ids).T


def score_from_cosine(cos, alpha, beta):
    """100 · sigmoid(alpha · cos + beta)."""
    return 100.0 * torch.sigmoid(alpha * cos + beta)


@torch.no_grad()
def siglip_score(images, ids, metric):
    """Score in (0, 100) for every matched (image, caption) pair; returns Tensor[B]."""
    cos = (metric.f_img(images) * metric.f_text(ids)).sum(dim=-1)
    return score_from_cosine(cos, metric.alpha, metric.beta)


def sigmoid_pair_loss(cos, alpha, beta):
    """-mean over all B² pairs of log σ(z_ij (alpha·cos_ij + beta)), z = +1 on the diagonal else -1."""
    labels = 2.0 * torch.eye(cos.shape[0], dtype=cos.dtype, device=cos.device) - 1.0
    return -F.logsigmoid(labels * (alpha * cos + beta)).mean()


def train_metric_step(metric, optimizer, images, ids):
    if images.shape[0] < 2:
        raise ValueError("Contrastive metric training needs a batch of at least 2 pairs")
    loss = sigmoid_pair_loss(metric.cosine_matrix(images, ids), metric.alpha, metric.beta)
    return optimizer_step(loss, optimizer, metric.parameters(), "metric training")


class AttributeClassifier(nn.Module):
    """
    Convnet with an entity-count head (1-3) and presence heads for colors, shapes and directed relations.

    There is one relation head per (left_of | above, subject kind, object kind) with distinct kinds,
    so a mirrored layout fires a different head than the stated one.
    """

    def __init__(self, image_size=16, width=32, hidden=128):
        super().__init__()
        self.trunk = nn.Sequential(_conv_trunk(width), nn.Linear(2 * width * (image_size // 4) ** 2, hidden), nn.SiLU())
        self.count_head = nn.Linear(hidden, 3)
        self.color_head = nn.Linear(hidden, len(COLORS))
        self.shape_head = nn.Linear(hidden, len(SHAPES))
        self.relation_head = nn.Linear(hidden, len(RELATION_KEYS))
        self.register_buffer("validation_accuracy", torch.tensor(float("nan")))

    def forward(self, images):
        h = self.trunk(images)
        return {
            "count": self.count_head(h),
            "colors": self.color_head(h),
            "shapes": self.shape_head(h),
            "relations": self.relation_head(h),
        }

    @torch.no_grad()
    def predict(self, images, batch_size=256):
        """Count probabilities sum to 1; presence heads go through a sigmoid and the 0.5 threshold."""
        parts = []
        for start in range(0, images.shape[0], batch_size):
            logits = self(images[start : start + batch_size])
            parts.append(
                {
                    "count": torch.softmax(logits["count"], dim=-1).argmax(dim=-1) + 1,
                    "colors": torch.sigmoid(logits["colors"]) > PRESENCE_THRESHOLD,
                    "shapes": torch.sigmoid(logits["shapes"]) > PRESENCE_THRESHOLD,
                    "relations": torch.sigmoid(logits["relations"]) > PRESENCE_THRESHOLD,
                }
            )
        return {key: torch.cat([p[key] for p in parts]).numpy() for key in ("count", "colors", "shapes", "relations")}


def relation_key(subject_kind, relation, object_kind):
    """Head key for 'subject relation object' between two entity kinds."""
    canonical, mirrored = CANONICAL_RELATIONS[relation]
    if mirrored:
        return canonical, object_kind, subject_kind
    return canonical, subject_kind, object_kind


def relation_presence(scene):
    """Directed relation heads that hold geometrically between some pair of differently-attributed entities."""
    present = np.zeros(len(RELATION_KEYS), dtype=bool)
    for a in scene.entities:
        for b in scene.entities:
            if a.kind == b.kind:
                continue
            for relation in ("left_of", "above"):
                if relation_holds(a, b, relation):
                    present[RELATION_INDEX[(relation, a.kind, b.kind)]] = True
    return present


def scene_labels(scenes):
    """Ground-truth targets for a list of SceneSpec, as numpy arrays keyed like the classifier heads."""
    return {
        "count": np.array([len(s.entities) for s in scenes]),
        "colors": np.array([[any(e.color == c for e in s.entities) for c in COLORS] for s in scenes]),
        "shapes": np.array([[any(e.shape == sh for e in s.entities) for sh in SHAPES] for s in scenes]),
        "relations": np.array([relation_presence(s) for s in scenes]).reshape(len(scenes), len(RELATION_KEYS)),
    }


def classifier_loss(clf, images, labels):
    logits = clf(images)
    dtype = logits["colors"].dtype
    loss = F.cross_entropy(logits["count"], torch.as_tensor(labels["count"] - 1, dtype=torch.long))
    for key in ("colors", "shapes", "relations"):
        loss = loss + F.binary_cross_entropy_with_logits(logits[key], torch.as_tensor(labels[key], dtype=dtype))
    return loss


def train_classifier_step(clf, optimizer, images, labels):
    loss = classifier_loss(clf, images, labels)
    return optimizer_step(loss, optimizer, clf.parameters(), "classifier training")


def _relation_flags(predicted, scenes):
    flags = []
    for i, scene in enumerate(scenes):
        stated = [
            RELATION_INDEX[relation_key(scene.entities[r.subject].kind, r.relation, scene.entities[r.object].kind)]
            for r in scene.relations
        ]
        flags.append(all(predicted["relations"][i, k] for k in stated))
    return np.array(flags, dtype=bool)


def judge(predicted, scenes):
    """Per-item correctness flags for every category plus the exact-match conjunction."""
    labels = scene_labels(scenes)
    flags = {
        "count": predicted["count"] == labels["count"],
        "colors": (predicted["colors"] == labels["colors"]).all(axis=1),
        "shapes": (predicted["shapes"] == labels["shapes"]).all(axis=1),
        "relations": _relation_flags(predicted, scenes),
    }
    flags["exact"] = flags["count"] & flags["colors"] & flags["shapes"] & flags["relations"]
    return flags


def validate_classifier(clf, images, scenes):
    """Exact-match accuracy on held-out ground-truth renders; stored on the classifier."""
    accuracy = float(judge(clf.predict(images), scenes)["exact"].mean())
    clf.validation_accuracy.fill_(accuracy)
    return accuracy


def attribute_accuracy(images, scenes, clf, min_validation_accuracy=0.95):
    """
    Classify generated images and compare against the scenes their captions describe.

    Args:
    - images: Tensor[N, 3, S, S] in [-1, 1].
    - scenes: list of N SceneSpec.
    - clf: AttributeClassifier whose validation accuracy has been recorded.
    - min_validation_accuracy: refuse to score with a weaker classifier.

    Returns:
    - dict with count_acc, color_acc, shape_acc, relation_acc and exact_match.
    """
    if images.shape[0] != len(scenes):
        raise ValueError(f"Got {images.shape[0]} images for {len(scenes)} scenes")
    validation = float(clf.validation_accuracy)
    if not validation >= min_validation_accuracy:
        raise RuntimeError(
            f"Classifier validation accuracy {validation:.4f} is below {min_validation_accuracy}; attribute scores would be meaningless"
        )
    predicted = clf.predict(images)
    labels = scene_labels(scenes)
    flags = judge(predicted, scenes)
    return {
        "count_acc": float(accuracy_score(labels["count"], predicted["count"])),
        "color_acc": float(accuracy_score(labels["colors"].astype(int), predicted["colors"].astype(int))),
        "shape_acc": float(accuracy_score(labels["shapes"].astype(int), predicted["shapes"].astype(int))),
        "relation_acc": float(flags["relations"].mean()),
        "exact_match": float(flags["exact"].mean()),
    }


def build_report(siglip_scores, attributes):
    report = {"siglip_mean": float(torch.as_tensor(siglip_scores).mean())}
    report.update(attributes)
    return {key: report[key] for key in REPORT_KEYS}
