"""Synthetic multi-center lesion segmentation corpus.

Each "center" has its own background colour, texture, lesion tint, blur and
artifact rates.  Center 6 uses colour/texture ranges disjoint from centers
1-5 and is never used for training.  Sequence splits add correlated frames,
negative frames (the lesion has left the field of view) and heavier
artifacts.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import netpbm

SPLITS = ("train", "test-C6-SIN", "test-C6-SEQ", "test-C1-5-SEQ")
MANIFEST = "manifest.txt"


@dataclass(frozen=True)
class CenterProfile:
    center: str
    background: tuple  # base RGB in [0, 1]
    texture: float  # amplitude of low-frequency background texture
    blob_count: tuple = (1, 2)  # inclusive range
    blob_area: tuple = (120, 600)  # pixels at the rendered side length
    eccentricity: tuple = (0.55, 1.0)  # minor/major axis ratio range
    tint: tuple = (0.92, 0.72, 0.52)  # lesion RGB
    specular_prob: float = 0.2
    occlusion_prob: float = 0.0
    blur: float = 0.6  # gaussian sigma in pixels
    color_jitter: float = 0.03

    def __post_init__(self):
        for name in ("specular_prob", "occlusion_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        lo, hi = self.blob_area
        if not 64 <= lo <= hi <= 1600:
            raise ValueError(f"blob_area must satisfy 64 <= min <= max <= 1600, got {self.blob_area}")
        if self.blob_count[0] < 0 or self.blob_count[0] > self.blob_count[1]:
            raise ValueError(f"bad blob_count range {self.blob_count}")
        if not 0 < self.eccentricity[0] <= self.eccentricity[1] <= 1:
            raise ValueError(f"bad eccentricity range {self.eccentricity}")

    def with_artifacts(self, scale: float) -> CenterProfile:
        return replace(self, specular_prob=min(1.0, self.specular_prob * scale),
                       occlusion_prob=min(1.0, self.occlusion_prob * scale))


SEEN_CENTERS = {
    "C1": CenterProfile("C1", (0.80, 0.36, 0.30), 0.05),
    "C2": CenterProfile("C2", (0.72, 0.30, 0.28), 0.06, tint=(0.90, 0.68, 0.50)),
    "C3": CenterProfile("C3", (0.84, 0.44, 0.38), 0.04, tint=(0.95, 0.78, 0.58)),
    "C4": CenterProfile("C4", (0.74, 0.40, 0.36), 0.05, tint=(0.92, 0.70, 0.56)),
    "C5": CenterProfile("C5", (0.78, 0.32, 0.24), 0.07, tint=(0.93, 0.70, 0.48)),
}
# darker, browner mucosa with a lower-contrast, greener lesion tint
UNSEEN_CENTER = CenterProfile("C6", (0.56, 0.30, 0.18), 0.10, tint=(0.78, 0.66, 0.40),
                              blur=1.0, specular_prob=0.3)


def _blob_axes(area: float, ratio: float) -> tuple[float, float]:
    major = math.sqrt(area / (math.pi * ratio))
    return major, major * ratio


def _sample_scene(profile: CenterProfile, rng: np.random.Generator, side: int) -> dict:
    base = np.asarray(profile.background) + rng.uniform(-1, 1, 3) * profile.color_jitter
    coarse = rng.standard_normal((3, 8, 8))
    texture = ndimage.zoom(coarse, (1, side / 8, side / 8), order=1)[:, :side, :side]
    fine = rng.standard_normal((3, side, side)) * 0.015
    background = base[:, None, None] + profile.texture * texture + fine
    blobs = []
    count = int(rng.integers(profile.blob_count[0], profile.blob_count[1] + 1))
    for _ in range(count):
        area = rng.uniform(*profile.blob_area)
        ratio = rng.uniform(*profile.eccentricity)
        a, b = _blob_axes(area, ratio)
        margin = min(a + 1, side / 2)
        blobs.append({
            "cx": rng.uniform(margin, side - margin),
            "cy": rng.uniform(margin, side - margin),
            "a": a, "b": b,
            "theta": rng.uniform(0, math.pi),
            "shade": rng.uniform(0.9, 1.05),
        })
    return {"profile": profile, "side": side, "background": background, "blobs": blobs,
            # artifacts use their own stream so their rates never shift lesion geometry
            "artifact_seed": int(rng.integers(2 ** 63))}


def _blob_radius(blob: dict, side: int, dx: float = 0.0, dy: float = 0.0) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64) + 0.5
    u = xx - (blob["cx"] + dx)
    v = yy - (blob["cy"] + dy)
    c, s = math.cos(blob["theta"]), math.sin(blob["theta"])
    return np.sqrt(((c * u + s * v) / blob["a"]) ** 2 + ((-s * u + c * v) / blob["b"]) ** 2)


def _draw(scene: dict, offsets, art_rng: np.random.Generator, visible: bool = True):
    profile, side = scene["profile"], scene["side"]
    image = scene["background"].copy()
    mask = np.zeros((side, side), dtype=np.uint8)
    if visible:
        tint = np.asarray(profile.tint)[:, None, None]
        for blob, (dx, dy) in zip(scene["blobs"], offsets):
            r = _blob_radius(blob, side, dx, dy)
            opacity = 1.0 / (1.0 + np.exp(np.clip((r - 1.0) / 0.08, -50, 50)))
            colour = tint * blob["shade"] * (0.9 + 0.12 * np.clip(1 - r ** 2, 0, 1))
            image = image * (1 - opacity) + colour * opacity
            mask |= (opacity >= 0.5).astype(np.uint8)
    if profile.blur > 0:
        image = ndimage.gaussian_filter(image, sigma=(0, profile.blur, profile.blur))

    # artifacts corrupt the image only; the mask is already final
    yy, xx = np.mgrid[0:side, 0:side]
    if art_rng.random() < profile.specular_prob:
        for _ in range(int(art_rng.integers(1, 4))):
            cx, cy = art_rng.uniform(0, side, 2)
            rad = art_rng.uniform(1.2, 2.8)
            image[:, (xx - cx) ** 2 + (yy - cy) ** 2 <= rad ** 2] = 1.0
    if art_rng.random() < profile.occlusion_prob:
        width = int(art_rng.integers(3, 7))
        start = int(art_rng.integers(0, side - width))
        level = art_rng.uniform(0.02, 0.12)
        if art_rng.random() < 0.5:
            image[:, start:start + width, :] = level
        else:
            image[:, :, start:start + width] = level
    return np.clip(image, 0, 1).astype(np.float32), mask


def render_frame(profile: CenterProfile, rng: np.random.Generator, side: int = 64):
    """One (image [3, H, W] float32, mask [H, W] uint8) pair."""
    scene = _sample_scene(profile, rng, side)
    art_rng = np.random.default_rng(scene["artifact_seed"])
    return _draw(scene, [(0.0, 0.0)] * len(scene["blobs"]), art_rng)


def render_sequence(profile: CenterProfile, length: int, jitter: float,
                    rng: np.random.Generator, side: int = 64, exit_frames: int = 0):
    """Correlated frames from one lesion configuration.

    Lesions follow a seeded random walk (per-frame step ~ N(0, jitter),
    capped at 2*jitter per axis and kept inside the frame).  The last
    ``exit_frames`` frames show the lesion gone from view (negative frames).
    Artifacts are redrawn for every frame.
    """
    if length < 1:
        raise ValueError("sequence length must be >= 1")
    if not 0 <= exit_frames <= length:
        raise ValueError("exit_frames must lie in [0, length]")
    scene = _sample_scene(profile, rng, side)
    art_rng = np.random.default_rng(scene["artifact_seed"])
    offsets = [[0.0, 0.0] for _ in scene["blobs"]]
    frames = []
    for t in range(length):
        if t > 0 and jitter > 0:
            for blob, off in zip(scene["blobs"], offsets):
                step = np.clip(rng.normal(0, jitter, 2), -2 * jitter, 2 * jitter)
                lo = min(blob["a"] + 1, side / 2)
                off[0] = float(np.clip(blob["cx"] + off[0] + step[0], lo, side - lo) - blob["cx"])
                off[1] = float(np.clip(blob["cy"] + off[1] + step[1], lo, side - lo) - blob["cy"])
        visible = t < length - exit_frames
        frames.append(_draw(scene, [tuple(o) for o in offsets], art_rng, visible))
    return frames


# ---------------------------------------------------------------------------
# corpus
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CorpusSpec:
    seed: int = 0
    side: int = 64
    train: int = 300
    c6_single: int = 40
    c6_sequence: int = 60
    seen_sequence: int = 60
    negative_fraction: float = 0.2
    sequence_length: int = 10
    jitter: float = 1.5
    # multiplies every artifact probability; 0 disables artifacts
    artifact_scale: float = 1.0

    def __post_init__(self):
        if min(self.train, self.c6_single, self.c6_sequence, self.seen_sequence) <= 0:
            raise ValueError("split sizes must be positive")
        if not 0 <= self.negative_fraction < 1:
            raise ValueError("negative_fraction must lie in [0, 1)")
        if self.sequence_length < 1:
            raise ValueError("sequence_length must be >= 1")
        if self.side <= 0 or self.side % 4:
            raise ValueError("side must be a positive multiple of 4")


def sequence_profile(profile: CenterProfile, heavy: bool) -> CenterProfile:
    """Sequence-modality variant: more blur and artifacts (heavier for ``heavy``)."""
    return replace(profile,
                   specular_prob=min(1.0, profile.specular_prob + (0.5 if heavy else 0.3)),
                   occlusion_prob=min(1.0, profile.occlusion_prob + (0.35 if heavy else 0.2)),
                   blur=profile.blur + (0.5 if heavy else 0.3),
                   blob_area=(max(profile.blob_area[0], 150), profile.blob_area[1]))


def _scale_area(profile: CenterProfile, side: int) -> CenterProfile:
    if side == 64:
        return profile
    k = (side / 64) ** 2
    lo, hi = profile.blob_area
    return replace(profile, blob_area=(max(64, min(1600, lo * k)), max(64, min(1600, hi * k))))


@dataclass(frozen=True)
class ManifestEntry:
    split: str
    center: str
    sequence: str
    frame: str
    positive: bool

    @property
    def image(self) -> str:
        return f"{self.split}/{self.center}/{self.frame}.ppm"

    @property
    def mask(self) -> str:
        return f"{self.split}/{self.center}/{self.frame}.pgm"

    def line(self) -> str:
        return (f"{self.split} {self.center} {self.sequence} {self.frame} "
                f"{int(self.positive)} {self.image} {self.mask}")


MANIFEST_HEADER = "# split center sequence frame positive image mask"


def _stream(seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, SPLITS.index(split), index])


def _plan(spec: CorpusSpec):
    """Yield (split, center, sequence id, frames) groups in a fixed order."""
    def final(profile):
        return _scale_area(profile.with_artifacts(spec.artifact_scale), spec.side)

    seen = list(SEEN_CENTERS.values())
    for i in range(spec.train):
        yield "train", final(seen[i % len(seen)]), None, i, 1, 0
    for i in range(spec.c6_single):
        yield "test-C6-SIN", final(UNSEEN_CENTER), None, i, 1, 0
    for split, total, profiles, heavy in (
            ("test-C6-SEQ", spec.c6_sequence, [UNSEEN_CENTER], False),
            ("test-C1-5-SEQ", spec.seen_sequence, seen, True)):
        n_seq = math.ceil(total / spec.sequence_length)
        lengths = [min(spec.sequence_length, total - k * spec.sequence_length) for k in range(n_seq)]
        negatives = round(spec.negative_fraction * total)
        exits = [negatives // n_seq + (1 if k < negatives % n_seq else 0) for k in range(n_seq)]
        for k in range(n_seq):
            if exits[k] > lengths[k]:
                raise ValueError("too many negative frames for the sequence lengths")
            profile = final(sequence_profile(profiles[k % len(profiles)], heavy))
            yield split, profile, k, k, lengths[k], exits[k]


def generate_corpus(spec: CorpusSpec, out_dir) -> list[ManifestEntry]:
    """Render every split to ``out_dir`` and write the manifest."""
    out = Path(out_dir)
    entries = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        for split, profile, seq, index, length, exits in _plan(spec):
            rng = _stream(spec.seed, split, index)
            folder = out / split / profile.center
            folder.mkdir(parents=True, exist_ok=True)
            if seq is None:
                frames = [render_frame(profile, rng, spec.side)]
                ids = [f"{index:05d}"]
                seq_id = "-"
            else:
                frames = render_sequence(profile, length, spec.jitter, rng, spec.side, exits)
                ids = [f"s{seq:03d}_f{t:02d}" for t in range(length)]
                seq_id = f"s{seq:03d}"
            for fid, (image, mask) in zip(ids, frames):
                entry = ManifestEntry(split, profile.center, seq_id, fid, bool(mask.any()))
                rgb = np.rint(image.transpose(1, 2, 0) * 255).astype(np.uint8)
                netpbm.write_ppm(out / entry.image, rgb)
                netpbm.write_pgm(out / entry.mask, mask * np.uint8(255))
                entries.append(entry)
        with open(out / MANIFEST, "w") as fh:
            fh.write(MANIFEST_HEADER + "\n")
            for e in entries:
                fh.write(e.line() + "\n")
    except OSError as exc:
        path = exc.filename or os.fspath(out)
        raise OSError(exc.errno, f"cannot write corpus: {exc.strerror}", path) from exc
    return entries


def read_manifest(root) -> list[ManifestEntry]:
    path = Path(root) / MANIFEST
    entries = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 7 or parts[4] not in ("0", "1"):
                raise ValueError(f"{path}:{n}: malformed manifest line")
            entries.append(ManifestEntry(parts[0], parts[1], parts[2], parts[3], parts[4] == "1"))
    return entries


def load_split(root, split: str, entries=None):
    """Stack a split's images [N, 3, H, W] and masks [N, H, W] in manifest order."""
    entries = read_manifest(root) if entries is None else entries
    chosen = [e for e in entries if e.split == split]
    if not chosen:
        raise ValueError(f"split {split!r} is empty or missing under {root}")
    pairs = [netpbm.load_pair(Path(root) / e.image, Path(root) / e.mask) for e in chosen]
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs]), chosen


def load_dir(directory):
    """Load every .ppm/.pgm pair under a directory tree (sorted by path)."""
    directory = Path(directory)
    images = sorted(directory.rglob("*.ppm"))
    if not images:
        raise ValueError(f"no images under {directory}")
    pairs = [netpbm.load_pair(p, p.with_suffix(".pgm")) for p in images]
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs]), images
