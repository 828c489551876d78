"""Deterministic synthetic human-object-interaction benchmark.

Scenes are axis-aligned colored rectangles: humans live in a reserved red
band, each object class has its own color. Every object interacts with one
human; the verb is a pure function of the object-to-human offset direction
(angular sector), so interactions are learnable from pixels alone. Verb and
object frequencies follow geometric skews, which produces the long-tail
needed for a rare/non-rare split.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import NoiseConfig
from .errors import ParseError, ValidationError

DEFAULT_VERBS = ("ride", "hold", "push", "pull", "lift", "touch")
DEFAULT_OBJECTS = ("bicycle", "ball", "box", "chair")
WIDE_OBJECTS = ("bicycle", "ball", "box", "chair",
                "table", "lamp", "plant", "drum")

HUMAN_COLOR = (0.90, 0.15, 0.15)
BACKGROUND = (0.05, 0.05, 0.05)
OBJECT_PALETTE = (
    (0.10, 0.20, 0.90),
    (0.10, 0.80, 0.20),
    (0.15, 0.85, 0.85),
    (0.60, 0.10, 0.80),
    (0.85, 0.75, 0.15),
    (0.90, 0.90, 0.90),
    (0.10, 0.45, 0.50),
    (0.45, 0.55, 0.10),
)

_SCENE_SALT = 60901
_ORACLE_SALT = 9173


@dataclass(frozen=True)
class VocabSpec:
    """Verb/object vocabulary plus the geometric sampling skews."""

    verbs: tuple = DEFAULT_VERBS
    objects: tuple = DEFAULT_OBJECTS
    verb_skew: float = 0.40
    object_skew: float = 0.45

    def __post_init__(self):
        if len(self.objects) > len(OBJECT_PALETTE):
            raise ValidationError("not enough palette colors for object classes")

    @property
    def categories(self):
        """All (verb, object) pairs in verb-major order."""
        return [(v, o) for v in self.verbs for o in self.objects]

    def category_id(self, verb_id: int, object_id: int) -> int:
        return verb_id * len(self.objects) + object_id


@dataclass(frozen=True)
class Entity:
    kind: str                 # "human" | "object"
    cls: int
    box: tuple                # (x1, y1, x2, y2) normalized


@dataclass(frozen=True)
class Interaction:
    human: int                # entity index
    object: int               # entity index
    verb: int


@dataclass(frozen=True)
class Scene:
    image_id: str
    seed: int
    entities: tuple = field(default_factory=tuple)
    interactions: tuple = field(default_factory=tuple)

    def gt_quads(self):
        """Ground truth as (human_box, object_box, object_class, verb) tuples."""
        out = []
        for it in self.interactions:
            h, o = self.entities[it.human], self.entities[it.object]
            out.append((h.box, o.box, o.cls, it.verb))
        return out


def _skewed_probs(n: int, ratio: float) -> np.ndarray:
    p = ratio ** np.arange(n)
    return p / p.sum()


def _choice(rng: np.random.Generator, probs: np.ndarray) -> int:
    return int(np.searchsorted(np.cumsum(probs), rng.random(), side="right"))


def verb_from_offset(dx: float, dy: float, n_verbs: int) -> int:
    """Angular sector of the object center relative to its human."""
    angle = math.atan2(dy, dx)          # [-pi, pi]
    frac = (angle + math.pi) / (2.0 * math.pi)
    return min(int(frac * n_verbs), n_verbs - 1)


def generate_scene(seed: int, vocab: VocabSpec = VocabSpec(),
                   image_id: str | None = None) -> Scene:
    """Build one scene reproducibly from its seed: 1-3 humans, 1-4 objects,
    verbs realized from the placed geometry."""
    rng = np.random.default_rng([_SCENE_SALT, seed])
    n_verbs = len(vocab.verbs)
    verb_probs = _skewed_probs(n_verbs, vocab.verb_skew)
    object_probs = _skewed_probs(len(vocab.objects), vocab.object_skew)

    entities = []
    n_humans = int(rng.integers(1, 4))
    n_objects = int(rng.integers(1, 5))
    for _ in range(n_humans):
        w = rng.uniform(0.26, 0.42)
        h = rng.uniform(0.26, 0.42)
        cx = rng.uniform(w / 2, 1.0 - w / 2)
        cy = rng.uniform(h / 2, 1.0 - h / 2)
        entities.append(Entity("human", 0, (cx - w / 2, cy - h / 2,
                                            cx + w / 2, cy + h / 2)))

    interactions = []
    sector = 2.0 * math.pi / n_verbs
    for _ in range(n_objects):
        cls = _choice(rng, object_probs)
        human_idx = int(rng.integers(0, n_humans))
        target_verb = _choice(rng, verb_probs)
        w = rng.uniform(0.18, 0.30)
        h = rng.uniform(0.18, 0.30)
        theta = -math.pi + (target_verb + 0.5 + rng.uniform(-0.35, 0.35)) * sector
        radius = rng.uniform(0.18, 0.38)
        hx1, hy1, hx2, hy2 = entities[human_idx].box
        hcx, hcy = (hx1 + hx2) / 2, (hy1 + hy2) / 2
        cx = min(max(hcx + radius * math.cos(theta), w / 2), 1.0 - w / 2)
        cy = min(max(hcy + radius * math.sin(theta), h / 2), 1.0 - h / 2)
        if abs(cx - hcx) < 1e-9 and abs(cy - hcy) < 1e-9:
            cx = min(cx + 0.01, 1.0 - w / 2)
        verb = verb_from_offset(cx - hcx, cy - hcy, n_verbs)
        entities.append(Entity("object", cls, (cx - w / 2, cy - h / 2,
                                               cx + w / 2, cy + h / 2)))
        interactions.append(Interaction(human_idx, len(entities) - 1, verb))

    return Scene(image_id or f"scene_{seed:08d}", seed,
                 tuple(entities), tuple(interactions))


def build_corpus(master_seed: int, n_scenes: int,
                 vocab: VocabSpec = VocabSpec(), prefix: str = "scene"):
    """n_scenes reproducible scenes; scene seeds derive from the master seed."""
    return [generate_scene(master_seed * 1_000_003 + i, vocab,
                           image_id=f"{prefix}_{i:05d}")
            for i in range(n_scenes)]


# ---------------------------------------------------------------------------
# rasterization
# ---------------------------------------------------------------------------


def _px_span(lo: float, hi: float, n: int):
    """Indices of pixels whose centers (i + 0.5)/n fall in [lo, hi)."""
    start = max(0, math.ceil(lo * n - 0.5))
    stop = min(n, math.ceil(hi * n - 0.5))
    return start, max(stop, start)


def render_scene(scene: Scene, height: int, width: int,
                 vocab: VocabSpec = VocabSpec()) -> np.ndarray:
    """Rasterize to a 3 x H x W float image in [0, 1]; later entities
    overdraw earlier ones."""
    if height < 16 or width < 16:
        raise ValidationError("render size must be at least 16 x 16")
    img = np.empty((3, height, width))
    for c in range(3):
        img[c] = BACKGROUND[c]
    for ent in scene.entities:
        color = HUMAN_COLOR if ent.kind == "human" else OBJECT_PALETTE[ent.cls]
        x1, y1, x2, y2 = ent.box
        c1, c2 = _px_span(x1, x2, width)
        r1, r2 = _px_span(y1, y2, height)
        for c in range(3):
            img[c, r1:r2, c1:c2] = color[c]
    return img


# ---------------------------------------------------------------------------
# stand-in detector for distillation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OracleDetection:
    cls: int
    box: tuple
    confidence: float


def oracle_detect(scene: Scene, noise: NoiseConfig = NoiseConfig()):
    """Detections for every object entity, with confidence (and optional
    drops) drawn deterministically from (scene seed, entity index)."""
    out = []
    for idx, ent in enumerate(scene.entities):
        if ent.kind != "object":
            continue
        rng = np.random.default_rng([_ORACLE_SALT, scene.seed, idx])
        drop_draw = rng.random()
        jitter_draw = rng.uniform(-1.0, 1.0)
        if drop_draw < noise.drop_prob:
            continue
        conf = noise.conf_base + noise.conf_jitter * jitter_draw
        out.append(OracleDetection(ent.cls, ent.box,
                                   float(min(max(conf, 0.0), 1.0))))
    return out


# ---------------------------------------------------------------------------
# corpus statistics
# ---------------------------------------------------------------------------


def category_counts(scenes, vocab: VocabSpec = VocabSpec()) -> np.ndarray:
    """Interaction counts per (verb, object) category, verb-major."""
    counts = np.zeros((len(vocab.verbs), len(vocab.objects)), dtype=np.int64)
    for scene in scenes:
        for _, _, cls, verb in scene.gt_quads():
            counts[verb, cls] += 1
    return counts


def rare_categories(counts: np.ndarray, threshold: int = 10):
    """(verb, object) pairs with fewer than threshold training instances."""
    return {(int(v), int(o))
            for v, o in zip(*np.where(counts < threshold))}


# ---------------------------------------------------------------------------
# corpus files
# ---------------------------------------------------------------------------

_HEADER = "# hoikit-scenes v1"


def write_dataset(path, scenes) -> None:
    """Line-delimited corpus; images are never stored, only seeds and
    annotations (field-exact float round trip via repr)."""
    with open(path, "w") as f:
        f.write(_HEADER + "\n")
        for s in scenes:
            ents = ";".join(
                f"{e.kind},{e.cls}," + ",".join(repr(v) for v in e.box)
                for e in s.entities)
            acts = ";".join(f"{i.human},{i.object},{i.verb}"
                            for i in s.interactions)
            f.write(f"{s.image_id}\t{s.seed}\t{ents}\t{acts}\n")


def _parse_entity(text: str, ln: int) -> Entity:
    parts = text.split(",")
    if len(parts) != 6:
        raise ParseError(f"entity needs 6 fields, got {text!r}", ln)
    kind = parts[0]
    if kind not in ("human", "object"):
        raise ParseError(f"unknown entity kind {kind!r}", ln)
    try:
        cls = int(parts[1])
        box = tuple(float(v) for v in parts[2:])
    except ValueError as exc:
        raise ParseError(f"bad entity numbers in {text!r}", ln) from exc
    if not (box[0] < box[2] and box[1] < box[3]):
        raise ParseError(f"degenerate box in {text!r}", ln)
    return Entity(kind, cls, box)


def read_dataset(path):
    scenes = []
    with open(path) as f:
        first = f.readline().rstrip("\n")
        if first != _HEADER:
            raise ParseError(f"bad corpus header {first!r}", 1)
        for ln, line in enumerate(f, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ParseError(f"expected 4 tab fields, got {len(parts)}", ln)
            image_id, seed_s, ents_s, acts_s = parts
            try:
                seed = int(seed_s)
            except ValueError as exc:
                raise ParseError(f"bad seed {seed_s!r}", ln) from exc
            entities = tuple(_parse_entity(e, ln)
                             for e in ents_s.split(";") if e)
            interactions = []
            for a in acts_s.split(";"):
                if not a:
                    continue
                nums = a.split(",")
                if len(nums) != 3:
                    raise ParseError(f"interaction needs 3 fields, got {a!r}", ln)
                try:
                    h, o, v = (int(x) for x in nums)
                except ValueError as exc:
                    raise ParseError(f"bad interaction numbers {a!r}", ln) from exc
                for idx, want in ((h, "human"), (o, "object")):
                    if not 0 <= idx < len(entities) or entities[idx].kind != want:
                        raise ParseError(f"interaction references bad {want} {idx}", ln)
                interactions.append(Interaction(h, o, v))
            scenes.append(Scene(image_id, seed, entities, tuple(interactions)))
    return scenes
