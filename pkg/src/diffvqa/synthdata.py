"""Deterministic synthetic longitudinal image pairs with change-focused QA.

Each sample renders a smooth radiograph-like background, places 1-3 lesions in
distinct zones of a 3×3 grid, applies one change to a target lesion and then
perturbs the main image with a small nuisance affine warp.  All randomness
comes from a Philox stream keyed by ``(seed, index)`` so samples can be
generated in any order.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .registration import affine_grid, AffineParams

KINDS = ("opacity", "effusion", "nodule", "consolidation")
CHANGES = ("appeared", "disappeared", "enlarged", "shrunk", "unchanged")
ROWS = ("upper", "middle", "lower")
COLS = ("left", "central", "right")

# Gaussian sigma range (px) at 64 px, peak intensity, allowed zone rows.  Sigmas scale
# with the image size but never drop below MIN_SIGMA.
KIND_STYLE = {
    "nodule": {"sigma": (2.0, 2.4), "peak": 0.6, "rows": (0, 1, 2)},
    "consolidation": {"sigma": (3.0, 3.4), "peak": 0.48, "rows": (0, 1, 2)},
    "effusion": {"sigma": (3.4, 3.8), "peak": 0.42, "rows": (2,)},
    "opacity": {"sigma": (4.0, 4.4), "peak": 0.34, "rows": (0, 1, 2)},
}
GROWTH = 1.5
MIN_SIGMA = 2.0
SUPPORT_FRAC = 0.05
# radius at which a Gaussian drops to SUPPORT_FRAC of its peak, in sigmas
SUPPORT_SIGMAS = math.sqrt(2.0 * math.log(1.0 / SUPPORT_FRAC))

QUESTIONS = (
    "what has changed?",
    "what is the difference between the two images?",
    "how has the {kind} changed?",
)
ANSWERS = {
    "appeared": "a new {kind} has appeared in the {zone} zone",
    "disappeared": "the {kind} in the {zone} zone has disappeared",
    "enlarged": "the {kind} in the {zone} zone has enlarged",
    "shrunk": "the {kind} in the {zone} zone has shrunk",
    "unchanged": "no change is observed",
}


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 64
    max_lesions: int = 3
    max_translation_px: float = 4.0
    max_rotation_deg: float = 4.0
    scale_range: tuple[float, float] = (0.95, 1.05)

    def hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class LesionSpec:
    kind: str
    zone: tuple[int, int]  # (row, col)
    center: tuple[float, float]  # (y, x) px
    radius: float  # Gaussian sigma, px
    peak: float

    def render(self, size: int) -> np.ndarray:
        yy, xx = np.mgrid[0:size, 0:size].astype(float)
        d2 = (yy - self.center[0]) ** 2 + (xx - self.center[1]) ** 2
        return self.peak * np.exp(-d2 / (2.0 * self.radius ** 2))

    def support(self, size: int) -> np.ndarray:
        return self.render(size) > SUPPORT_FRAC * self.peak

    def bbox(self, size: int) -> tuple[int, int, int, int]:
        ys, xs = np.nonzero(self.support(size))
        return int(ys.min()), int(ys.max()), int(xs.min()), int(xs.max())


@dataclass
class StudyPair:
    id: str
    main: np.ndarray  # 1×H×W in [0, 1]
    ref: np.ndarray
    theta_star: np.ndarray  # 2×3 nuisance warp applied to the main image
    change: str
    kind: str
    zone: str
    ref_lesions: list[LesionSpec]
    main_lesions: list[LesionSpec]
    gt_mask: np.ndarray  # H×W bool
    question: str
    answer: str
    keyword: str
    main_clean: np.ndarray | None = field(default=None, repr=False)


def zone_name(zone: tuple[int, int]) -> str:
    return f"{COLS[zone[1]]} {ROWS[zone[0]]}"


def answer_of(kind: str, zone: str, change: str, question_choice: int) -> tuple[str, str, str]:
    """(question, answer, keyword) for a change spec; pure table lookup."""
    question = QUESTIONS[question_choice].format(kind=kind)
    answer = ANSWERS[change].format(kind=kind, zone=zone)
    keyword = "change" if change == "unchanged" else kind
    return question, answer, keyword


def parse_answer(answer: str) -> dict:
    """Invert the answer templates; unknown phrasing yields ``None`` fields."""
    words = answer.lower().replace("?", " ").split()
    out = {"kind": None, "zone": None, "change": None}
    if "no" in words and "change" in words:
        out["change"] = "unchanged"
        return out
    for change in ("disappeared", "appeared", "enlarged", "shrunk"):
        if change in words:
            out["change"] = change
            break
    for kind in KINDS:
        if kind in words:
            out["kind"] = kind
            break
    for i in range(len(words) - 1):
        if words[i] in COLS and words[i + 1] in ROWS:
            out["zone"] = f"{words[i]} {words[i + 1]}"
            break
    return out


def sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[seed & (2 ** 64 - 1), index]))


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(float) / (size - 1)
    img = np.zeros((size, size))
    for _ in range(4):
        fy, fx = rng.uniform(0.3, 1.6, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        img += rng.uniform(0.02, 0.05) * np.cos(2 * np.pi * (fy * yy + fx * xx) + phase)
    # rib-like bands: gently curved horizontal sinusoids
    period = rng.uniform(0.16, 0.22)
    bend = rng.uniform(0.1, 0.25)
    ribs = np.cos(2 * np.pi * (yy + bend * (xx - 0.5) ** 2) / period + rng.uniform(0, 2 * np.pi))
    img += 0.05 * ribs
    return img + rng.uniform(0.2, 0.26)


def _place(rng: np.random.Generator, kind: str, zone: tuple[int, int], size: int,
           max_sigma: float) -> tuple[float, float]:
    cell = size / 3.0
    margin = SUPPORT_SIGMAS * max_sigma + 1.0
    out = []
    for axis in zone:
        lo = max(axis * cell, margin)
        hi = min((axis + 1) * cell - 1e-6, size - 1 - margin)
        if lo > hi:
            raise ValueError(f"lesion of sigma {max_sigma} cannot fit in zone {zone}")
        out.append(rng.uniform(lo, hi))
    return out[0], out[1]


def nuisance_theta(rng: np.random.Generator, cfg: SynthConfig) -> np.ndarray:
    size = cfg.image_size
    ang = math.radians(rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg))
    s = rng.uniform(*cfg.scale_range)
    t_px = rng.uniform(-cfg.max_translation_px, cfg.max_translation_px, size=2)
    t = t_px / ((size - 1) / 2.0)
    c, sn = math.cos(ang), math.sin(ang)
    return np.array([[s * c, -s * sn, t[0]], [s * sn, s * c, t[1]]])


def apply_affine(img: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Warp an H×W array with a 2×3 block (zero outside)."""
    H, W = img.shape
    with T.no_grad():
        grid = affine_grid(AffineParams(theta[None]), H, W)
        out = T.grid_sample_bilinear(T.Tensor(img.reshape(1, 1, H, W)), grid)
    return out.data[0, 0]


def generate_pair(seed: int, index: int = 0, cfg: SynthConfig = SynthConfig(),
                  change: str | None = None) -> StudyPair:
    """Render one study pair; identical arguments give identical output."""
    size = cfg.image_size
    if size < 32:
        raise ValueError("image_size must be >= 32")
    rng = sample_rng(seed, index)
    background = _background(rng, size)
    n_lesions = int(rng.integers(1, cfg.max_lesions + 1))
    change = change if change is not None else CHANGES[int(rng.integers(len(CHANGES)))]

    kinds = [KINDS[int(rng.integers(len(KINDS)))] for _ in range(n_lesions)]
    all_zones = [(r, c) for r in range(3) for c in range(3)]
    used: set[tuple[int, int]] = set()
    ref_lesions: list[LesionSpec] = []
    main_lesions: list[LesionSpec] = []
    target_small = target_large = None
    for i, kind in enumerate(kinds):
        style = KIND_STYLE[kind]
        options = [z for z in all_zones if z[0] in style["rows"] and z not in used]
        zone = options[int(rng.integers(len(options)))]
        used.add(zone)
        lo, hi = (max(MIN_SIGMA, v * size / 64.0) for v in style["sigma"])
        sigma = rng.uniform(lo, hi)
        cy, cx = _place(rng, kind, zone, size, sigma * GROWTH)
        small = LesionSpec(kind, zone, (cy, cx), sigma, style["peak"])
        if i == 0:
            large = LesionSpec(kind, zone, (cy, cx), sigma * GROWTH, style["peak"])
            target_small, target_large = small, large
            before, after = {
                "appeared": (None, small),
                "disappeared": (small, None),
                "enlarged": (small, large),
                "shrunk": (large, small),
                "unchanged": (small, small),
            }[change]
            if before is not None:
                ref_lesions.append(before)
            if after is not None:
                main_lesions.append(after)
        else:
            ref_lesions.append(small)
            main_lesions.append(small)

    def render(lesions):
        img = background.copy()
        for les in lesions:
            img += les.render(size)
        return np.clip(img, 0.0, 1.0)

    ref = render(ref_lesions)
    main_clean = render(main_lesions)
    theta_star = nuisance_theta(rng, cfg)
    main = np.clip(apply_affine(main_clean, theta_star), 0.0, 1.0)

    if change == "unchanged":
        gt_mask = np.zeros((size, size), dtype=bool)
    elif change in ("enlarged", "shrunk"):
        gt_mask = target_large.support(size) | target_small.support(size)
    else:
        gt_mask = target_small.support(size)

    zname = zone_name(target_small.zone)
    q_choice = int(rng.integers(len(QUESTIONS)))
    question, answer, keyword = answer_of(kinds[0], zname, change, q_choice)
    return StudyPair(
        id=f"{seed}-{index:06d}", main=main[None], ref=ref[None], theta_star=theta_star,
        change=change, kind=kinds[0], zone=zname, ref_lesions=ref_lesions,
        main_lesions=main_lesions, gt_mask=gt_mask, question=question, answer=answer,
        keyword=keyword, main_clean=main_clean[None],
    )


def target_lesion(pair: StudyPair) -> LesionSpec:
    """The changed lesion at its larger extent (for bounding-box checks)."""
    cands = [les for les in pair.ref_lesions + pair.main_lesions
             if zone_name(les.zone) == pair.zone and les.kind == pair.kind]
    return max(cands, key=lambda les: les.radius)


# -- PGM -------------------------------------------------------------------------


def write_pgm(path, img: np.ndarray) -> None:
    """Binary P5, maxval 255, value = round(255·v)."""
    img = np.asarray(img)
    if img.ndim == 3:
        img = img[0]
    if img.dtype == bool:
        q = np.where(img, 255, 0).astype(np.uint8)
    else:
        q = np.clip(np.rint(255.0 * img), 0, 255).astype(np.uint8)
    H, W = q.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{W} {H}\n255\n".encode("ascii"))
        fh.write(q.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary P5 file into an H×W float array in [0, 1]."""
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5)")
    W, H, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval >= 256:
        raise ValueError(f"{path}: 16-bit PGM not supported")
    pos += 1
    data = np.frombuffer(raw[pos:pos + W * H], dtype=np.uint8)
    if data.size != W * H:
        raise ValueError(f"{path}: truncated PGM payload")
    return data.reshape(H, W).astype(float) / maxval


# -- dataset on disk ---------------------------------------------------------------------


@dataclass
class DatasetManifest:
    root: str
    split: str
    count: int
    seed: int
    config_hash: str


@dataclass
class Sample:
    """A study pair as stored on disk."""

    id: str
    main: np.ndarray  # 1×H×W
    ref: np.ndarray
    question: str
    answer: str
    keyword: str
    change: str
    theta_star: np.ndarray
    mask: np.ndarray  # H×W bool

    @property
    def gt_mask(self) -> np.ndarray:
        # lets a loaded split be written back with write_dataset
        return self.mask


def split_sizes(count: int, ratios=(0.8, 0.1, 0.1)) -> dict[str, int]:
    """Floor rule for valid/test; the remainder goes to train."""
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError("split ratios must be three non-negative numbers summing to 1")
    valid = int(math.floor(count * ratios[1] + 1e-9))
    test = int(math.floor(count * ratios[2] + 1e-9))
    return {"train": count - valid - test, "valid": valid, "test": test}


def write_dataset(manifest: DatasetManifest, pairs: list[StudyPair]) -> Path:
    root = Path(manifest.root)
    split_dir = root / manifest.split
    (split_dir / "images").mkdir(parents=True, exist_ok=True)
    (split_dir / "masks").mkdir(parents=True, exist_ok=True)
    lines = []
    for p in pairs:
        main_rel = f"{manifest.split}/images/{p.id}_main.pgm"
        ref_rel = f"{manifest.split}/images/{p.id}_ref.pgm"
        mask_rel = f"{manifest.split}/masks/{p.id}.pgm"
        write_pgm(root / main_rel, p.main)
        write_pgm(root / ref_rel, p.ref)
        write_pgm(root / mask_rel, p.gt_mask)
        lines.append(json.dumps({
            "id": p.id, "main_path": main_rel, "ref_path": ref_rel,
            "question": p.question, "answer": p.answer, "keyword": p.keyword,
            "change": p.change, "theta_star": [float(v) for v in p.theta_star.reshape(-1)],
            "mask_path": mask_rel,
        }, sort_keys=True))
    path = root / f"{manifest.split}.jsonl"
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return path


def read_dataset(manifest: DatasetManifest) -> list[Sample]:
    root = Path(manifest.root)
    path = root / f"{manifest.split}.jsonl"
    samples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                theta = np.array(rec["theta_star"], dtype=float).reshape(2, 3)
                samples.append(Sample(
                    id=rec["id"], main=read_pgm(root / rec["main_path"])[None],
                    ref=read_pgm(root / rec["ref_path"])[None], question=rec["question"],
                    answer=rec["answer"], keyword=rec["keyword"], change=rec["change"],
                    theta_star=theta, mask=read_pgm(root / rec["mask_path"]) > 0.5,
                ))
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed record ({exc})") from exc
    if len(samples) != manifest.count:
        raise ValueError(f"{path}: expected {manifest.count} samples, found {len(samples)}")
    return samples


def generate_corpus(root, count: int, seed: int = 0, cfg: SynthConfig = SynthConfig(),
                    ratios=(0.8, 0.1, 0.1)) -> dict[str, DatasetManifest]:
    """Generate all splits under ``root`` and write ``manifest.json``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    sizes = split_sizes(count, ratios)
    manifests = {}
    start = 0
    for split in ("train", "valid", "test"):
        n = sizes[split]
        pairs = [generate_pair(seed, start + i, cfg) for i in range(n)]
        start += n
        man = DatasetManifest(str(root), split, n, seed, cfg.hash())
        write_dataset(man, pairs)
        manifests[split] = man
    meta = {
        "seed": seed, "config": asdict(cfg), "config_hash": cfg.hash(),
        "splits": {k: {"count": v.count, "annotations": f"{k}.jsonl"} for k, v in manifests.items()},
    }
    (root / "manifest.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    return manifests


def load_manifest(root, split: str) -> DatasetManifest:
    meta = json.loads((Path(root) / "manifest.json").read_text())
    if split not in meta["splits"]:
        raise ValueError(f"unknown split {split!r}")
    return DatasetManifest(str(root), split, meta["splits"][split]["count"], meta["seed"],
                           meta["config_hash"])


def load_split(root, split: str) -> list[Sample]:
    return read_dataset(load_manifest(root, split))
