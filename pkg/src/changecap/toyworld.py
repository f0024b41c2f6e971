"""Synthetic bi-temporal grid scenes with templated change captions.

A sample is a pair of 32x32 single-channel renderings of the same scene at
two times, plus five paraphrased reference captions describing what changed
(object class, direction of change, count, and one of five disjoint named
regions). Captions are deterministic functions of the change events, and
events are recoverable from any reference by inverse template parsing, so
the language task has an exact ground truth.

A tiny trainable patch embedding stands in for a large pretrained image
backbone, keeping the whole pipeline trainable on a CPU in minutes.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import Linear, init_linear
from .rng import stream
from .tensor import ConfigError, Tensor, read_array, write_array
from .vocabulary import Vocabulary

GRID_SIZE = 32
CLASSES = ("house", "road", "trees")
INTENSITY = {"empty": 0.0, "road": 0.33, "trees": 0.66, "house": 1.0}
_CLASS_ID = {"empty": 0, "house": 1, "road": 2, "trees": 3}
_ID_CLASS = {v: k for k, v in _CLASS_ID.items()}

REGIONS = ("top-left", "top-right", "bottom-left", "bottom-right", "center")
# disjoint (row0, row1, col0, col1) boxes, end-exclusive; aligned to the
# 8-pixel patch grid so a region never straddles a patch shared with another
REGION_BOXES = {
    "top-left": (0, 8, 0, 8),
    "top-right": (0, 8, 24, 32),
    "bottom-left": (24, 32, 0, 8),
    "bottom-right": (24, 32, 24, 32),
    "center": (8, 24, 8, 24),
}

_NOUNS = {"house": ("house", "houses"), "road": ("road", "roads"),
          "trees": ("tree", "trees")}
_NOUN_CLASS = {form: cls for cls, forms in _NOUNS.items() for form in forms}

# Five paraphrase templates per event type; reference i uses template i for
# every clause of a sample, so references stay deterministic.
TEMPLATES_ADDED = (
    "{c} {n} {hh} been added in the {r}",
    "{c} {n} {hh} appeared in the {r}",
    "{c} new {n} {hh} been built in the {r}",
    "the {r} now contains {c} more {n}",
    "{c} {n} showed up in the {r}",
)
TEMPLATES_REMOVED = (
    "{c} {n} {hh} been removed from the {r}",
    "{c} {n} {hh} disappeared from the {r}",
    "{c} {n} {hh} been demolished in the {r}",
    "the {r} has lost {c} {n}",
    "{c} {n} vanished from the {r}",
)
TEMPLATES_NONE = (
    "the scene remains the same",
    "there is no change in the scene",
    "nothing has changed in the scene",
    "the two scenes look identical",
    "no change is observed",
)
NUM_REFERENCES = 5


@dataclass(frozen=True)
class ChangeEvent:
    kind: str       # "added" | "removed"
    object: str     # cell class
    region: str
    count: int


@dataclass
class GridScene:
    grid: np.ndarray  # (H, W) uint8 class ids

    def rendered(self) -> np.ndarray:
        """(H, W, 1) float32 image with fixed per-class intensity."""
        lut = np.array([INTENSITY[_ID_CLASS[i]] for i in range(4)], dtype=np.float32)
        return lut[self.grid][..., None]


@dataclass
class ToySample:
    sample_id: int
    scene_t1: GridScene
    scene_t2: GridScene
    events: list[ChangeEvent]
    references: list[str] = field(default_factory=list)


def _clause(event: ChangeEvent, template_idx: int) -> str:
    sing, plur = _NOUNS[event.object]
    noun = sing if event.count == 1 else plur
    hh = "has" if event.count == 1 else "have"
    table = TEMPLATES_ADDED if event.kind == "added" else TEMPLATES_REMOVED
    return table[template_idx].format(c=event.count, n=noun, hh=hh, r=event.region)


def render_caption(events: list[ChangeEvent], template_idx: int) -> str:
    if not events:
        return TEMPLATES_NONE[template_idx]
    return " and ".join(_clause(e, template_idx) for e in events)


def _template_regex(template: str) -> re.Pattern:
    pat = re.escape(template)
    pat = pat.replace(re.escape("{c}"), r"(?P<c>\d+)")
    pat = pat.replace(re.escape("{n}"), r"(?P<n>[a-z]+)")
    pat = pat.replace(re.escape("{hh}"), r"(?:has|have)")
    pat = pat.replace(re.escape("{r}"), r"(?P<r>[a-z\-]+)")
    return re.compile("^" + pat + "$")

_ADDED_RES = tuple(_template_regex(t) for t in TEMPLATES_ADDED)
_REMOVED_RES = tuple(_template_regex(t) for t in TEMPLATES_REMOVED)


def _parse_clause(clause: str) -> ChangeEvent:
    for kind, regexes in (("added", _ADDED_RES), ("removed", _REMOVED_RES)):
        for rx in regexes:
            m = rx.match(clause)
            if not m:
                continue
            noun, region = m.group("n"), m.group("r")
            count = int(m.group("c"))
            if noun not in _NOUN_CLASS or region not in REGIONS:
                continue
            sing, plur = _NOUNS[_NOUN_CLASS[noun]]
            if noun != (sing if count == 1 else plur):
                continue  # number disagreement: not a well-formed clause
            return ChangeEvent(kind=kind, object=_NOUN_CLASS[noun],
                               region=region, count=count)
    raise ValueError(f"unparseable clause: {clause!r}")


def parse_caption(caption: str) -> list[ChangeEvent]:
    """Recover the event list from any reference string (inverse templating)."""
    if caption in TEMPLATES_NONE:
        return []
    return [_parse_clause(c) for c in caption.split(" and ")]


def _place_cells(rng, grid_pairs, box, count):
    """Pick ``count`` distinct positions inside ``box`` empty in every grid."""
    r0, r1, c0, c1 = box
    free = [(r, c) for r in range(r0, r1) for c in range(c0, c1)
            if all(g[r, c] == 0 for g in grid_pairs)]
    idx = rng.choice(len(free), size=count, replace=False)
    return [free[i] for i in idx]


def generate_sample(rng_seed: int) -> ToySample:
    """Deterministic sample: static clutter plus 0-2 change events."""
    rng = stream(rng_seed, "toy-sample")

    u = rng.random()
    n_events = 0 if u < 0.4 else (1 if u < 0.8 else 2)
    region_ids = rng.choice(len(REGIONS), size=n_events, replace=False)
    drafts = []
    for rid in region_ids:
        drafts.append((
            int(rid),
            str(rng.choice(CLASSES)),
            "added" if rng.random() < 0.5 else "removed",
            int(rng.integers(1, 4)),
        ))
    drafts.sort()  # canonical caption order: by region, then class, then kind

    grid1 = np.zeros((GRID_SIZE, GRID_SIZE), dtype=np.uint8)
    n_bg = int(rng.integers(4, 11))
    for _ in range(n_bg):
        r, c = int(rng.integers(GRID_SIZE)), int(rng.integers(GRID_SIZE))
        grid1[r, c] = _CLASS_ID[str(rng.choice(CLASSES))]
    grid2 = grid1.copy()

    events = []
    for rid, cls, kind, count in drafts:
        region = REGIONS[rid]
        cells = _place_cells(rng, (grid1, grid2), REGION_BOXES[region], count)
        target = grid2 if kind == "added" else grid1
        for r, c in cells:
            target[r, c] = _CLASS_ID[cls]
        events.append(ChangeEvent(kind=kind, object=cls, region=region, count=count))

    refs = [render_caption(events, i) for i in range(NUM_REFERENCES)]
    return ToySample(sample_id=rng_seed, scene_t1=GridScene(grid1),
                     scene_t2=GridScene(grid2), events=events, references=refs)


# ---- patch embedding (backbone stand-in) ----------------------------------

@dataclass
class PatchEmbed:
    proj: Linear
    patch: int

    @property
    def width(self) -> int:
        return self.proj.w.shape[1]

    def tokens_per_image(self, h: int, w: int) -> int:
        return (h // self.patch) * (w // self.patch)

    def __call__(self, rendered: np.ndarray) -> Tensor:
        """(..., H, W, 1) image -> (..., L, D) trainable token sequence."""
        return self.proj(Tensor(extract_patches(rendered, self.patch),
                                dtype=self.proj.w.dtype))


def extract_patches(rendered: np.ndarray, patch: int) -> np.ndarray:
    rendered = np.asarray(rendered)
    h, w = rendered.shape[-3], rendered.shape[-2]
    if h % patch or w % patch:
        raise ConfigError(f"image {h}x{w} not divisible by patch size {patch}")
    lead = rendered.shape[:-3]
    x = rendered.reshape(lead + (h // patch, patch, w // patch, patch))
    x = np.moveaxis(x, -3, -2)  # (..., H/P, W/P, P, P)
    return x.reshape(lead + ((h // patch) * (w // patch), patch * patch))


def init_patch_embed(width: int, rng: np.random.Generator, patch: int = 8,
                     dtype=np.float32) -> PatchEmbed:
    return PatchEmbed(proj=init_linear(patch * patch, width, rng, dtype=dtype),
                      patch=patch)


def patch_embed(rendered: np.ndarray, params: PatchEmbed) -> Tensor:
    return params(rendered)


# ---- dataset construction and on-disk layout -------------------------------

@dataclass
class Split:
    name: str
    samples: list[ToySample]

    def images(self) -> tuple[np.ndarray, np.ndarray]:
        """Stacked (N, H, W, 1) renderings for both times."""
        t1 = np.stack([s.scene_t1.rendered() for s in self.samples])
        t2 = np.stack([s.scene_t2.rendered() for s in self.samples])
        return t1, t2


@dataclass
class ToyDataset:
    vocab: Vocabulary
    splits: dict[str, Split]

    def split(self, name: str) -> Split:
        if name not in self.splits:
            raise KeyError(f"no split named '{name}'")
        return self.splits[name]


def caption_words(caption: str) -> list[str]:
    return caption.split()


def build_dataset(n_train: int, n_val: int, n_test: int, seed: int) -> ToyDataset:
    """Disjoint seed ranges per split; vocabulary from train references only."""
    if min(n_train, n_val, n_test) < 1:
        raise ValueError("all split sizes must be >= 1")
    base = seed << 32
    sizes = (("train", n_train), ("val", n_val), ("test", n_test))
    splits: dict[str, Split] = {}
    offset = 0
    for name, count in sizes:
        samples = [generate_sample(base + offset + i) for i in range(count)]
        splits[name] = Split(name=name, samples=samples)
        offset += count
    words: list[str] = []
    for s in splits["train"].samples:
        for ref in s.references:
            words.extend(caption_words(ref))
    return ToyDataset(vocab=Vocabulary.from_words(words), splits=splits)


def save_dataset(ds: ToyDataset, root: str | Path) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    _atomic_write_text(root / "vocab.txt", "\n".join(ds.vocab.tokens) + "\n")
    for name, split in ds.splits.items():
        d = root / name
        d.mkdir(parents=True, exist_ok=True)
        tmp = d / "scenes.bin.tmp"
        with open(tmp, "wb") as fh:
            for s in split.samples:
                write_array(fh, s.scene_t1.rendered())
                write_array(fh, s.scene_t2.rendered())
        tmp.replace(d / "scenes.bin")
        lines = []
        for s in split.samples:
            lines.append(json.dumps({
                "sample_id": s.sample_id,
                "references": s.references,
                "events": [vars(e) for e in s.events],
            }, sort_keys=True))
        _atomic_write_text(d / "captions.jsonl", "\n".join(lines) + "\n")


def load_dataset(root: str | Path) -> ToyDataset:
    root = Path(root)
    vocab_path = root / "vocab.txt"
    if not vocab_path.exists():
        raise FileNotFoundError(f"no vocab.txt under {root}")
    vocab = Vocabulary(tokens=vocab_path.read_text().splitlines())
    splits: dict[str, Split] = {}
    for name in ("train", "val", "test"):
        d = root / name
        if not d.exists():
            continue
        samples = []
        with open(d / "captions.jsonl") as fh, open(d / "scenes.bin", "rb") as sb:
            for line in fh:
                rec = json.loads(line)
                img1 = read_array(sb)
                img2 = read_array(sb)
                samples.append(ToySample(
                    sample_id=rec["sample_id"],
                    scene_t1=GridScene(_grid_from_render(img1)),
                    scene_t2=GridScene(_grid_from_render(img2)),
                    events=[ChangeEvent(**e) for e in rec["events"]],
                    references=rec["references"],
                ))
        splits[name] = Split(name=name, samples=samples)
    return ToyDataset(vocab=vocab, splits=splits)


def _grid_from_render(img: np.ndarray) -> np.ndarray:
    """Invert the injective class->intensity rendering."""
    levels = np.array([INTENSITY[_ID_CLASS[i]] for i in range(4)], dtype=np.float32)
    flat = img[..., 0]
    ids = np.abs(flat[..., None] - levels).argmin(axis=-1)
    return ids.astype(np.uint8)


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)
