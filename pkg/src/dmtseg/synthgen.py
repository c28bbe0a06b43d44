"""Deterministic multichannel lesion phantoms with nested, irregular regions."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grid import LabelMap, MultiChannelImage, read_mdi, write_mdi

BACKGROUND, EDEMA, CORE, ENHANCING = 0, 1, 2, 3
CLASS_NAMES = ("background", "edema", "core", "enhancing")

# rows: class, columns: FLAIR-like, T2-like, T1c-like channel.  Neighbouring
# classes differ by about 2.5 noise deviations per pixel at the default noise
# level, so single pixels are ambiguous; enhancing tissue is bright in T1c.
DEFAULT_CONTRAST = (
    (0.30, 0.30, 0.30),
    (0.36, 0.37, 0.31),
    (0.33, 0.43, 0.27),
    (0.40, 0.34, 1.00),
)

# composite regions scored by Dice: whole, core and enhancing lesion
REGIONS = {"HT": (EDEMA, CORE, ENHANCING), "CT": (CORE, ENHANCING), "ET": (ENHANCING,)}

N_HARMONICS = 5
MAX_RETRIES = 10


@dataclass(frozen=True)
class PhantomParams:
    size: int = 128
    subjects: int = 20
    rng_seed: int = 42
    boundary_irregularity: float = 0.3
    noise_sigma: float = 0.05
    contrast: tuple = field(default=DEFAULT_CONTRAST)
    # background structures with the edema contrast but no lesion inside
    mimics: int = 0

    def __post_init__(self):
        contrast = np.asarray(self.contrast, dtype=np.float64)
        if self.size < 32:
            raise ValueError("phantom size must be >= 32")
        if contrast.shape[0] != len(CLASS_NAMES) or contrast.shape[1] < 1:
            raise ValueError("contrast profile must be (4 classes, channels)")
        for ch in contrast.T:
            if np.unique(ch).size != ch.size:
                raise ValueError("class contrasts must be distinct within each channel")
        if self.subjects < 1 or self.noise_sigma < 0 or self.boundary_irregularity < 0 or self.mimics < 0:
            raise ValueError("invalid phantom parameters")
        object.__setattr__(self, "contrast", tuple(tuple(float(v) for v in row) for row in contrast))

    @property
    def noise_std(self) -> float:
        contrast = np.asarray(self.contrast)
        return self.noise_sigma * float(contrast.max() - contrast.min())


def _radius_fn(rng: np.random.Generator, base: float, amplitude: float):
    weights = rng.uniform(0.5, 1.0, N_HARMONICS) / np.arange(1, N_HARMONICS + 1)
    weights *= amplitude / weights.sum()
    phases = rng.uniform(0, 2 * np.pi, N_HARMONICS)
    k = np.arange(1, N_HARMONICS + 1)

    def radius(theta):
        theta = np.asarray(theta)[..., None]
        return base * (1.0 + (weights * np.cos(k * theta + phases)).sum(axis=-1))

    return radius


def _lesion_labels(rng: np.random.Generator, size: int, irregularity: float):
    cy, cx = rng.uniform(0.38, 0.62, 2) * size
    r_edema = rng.uniform(0.14, 0.22) * size
    r_core = r_edema * rng.uniform(0.50, 0.65)
    r_enh = r_core * rng.uniform(0.40, 0.55)
    theta_grid = np.linspace(0, 2 * np.pi, 720, endpoint=False)
    amplitude = irregularity
    for _ in range(MAX_RETRIES):
        fns = [_radius_fn(rng, r, amplitude) for r in (r_edema, r_core, r_enh)]
        radii = [f(theta_grid) for f in fns]
        if all(np.all(inner < outer) for outer, inner in zip(radii, radii[1:])) and radii[2].min() > 1.0:
            break
        amplitude *= 0.7
    else:
        raise RuntimeError("could not generate properly nested lesion regions")
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dist = np.hypot(yy - cy, xx - cx)
    theta = np.arctan2(yy - cy, xx - cx)
    labels = np.zeros((size, size), dtype=np.uint8)
    inside = np.ones((size, size), dtype=bool)
    for cls, fn in zip((EDEMA, CORE, ENHANCING), fns):
        inside &= dist <= fn(theta)
        labels[inside] = cls
    return labels, (cy, cx, r_edema * (1 + amplitude))


def _mimic_mask(rng: np.random.Generator, size: int, irregularity: float, count: int, lesion) -> np.ndarray:
    """Irregular blobs placed clear of the lesion."""
    ly, lx, lr = lesion
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    mask = np.zeros((size, size), dtype=bool)
    for _ in range(count):
        r = rng.uniform(0.035, 0.07) * size
        fn = _radius_fn(rng, r, irregularity)
        for _ in range(50):
            my, mx = rng.uniform(0.12, 0.88, 2) * size
            if np.hypot(my - ly, mx - lx) > lr + 1.5 * r + 3:
                break
        else:
            continue
        mask |= np.hypot(yy - my, xx - mx) <= fn(np.arctan2(yy - my, xx - mx))
    return mask


def generate_subject(params: PhantomParams, index: int) -> tuple[MultiChannelImage, LabelMap]:
    rng = np.random.default_rng(np.random.SeedSequence([params.rng_seed, index]))
    labels, lesion = _lesion_labels(rng, params.size, params.boundary_irregularity)
    contrast = np.asarray(params.contrast)
    clean = contrast[labels].transpose(2, 0, 1)
    if params.mimics:
        mimic = _mimic_mask(rng, params.size, params.boundary_irregularity, params.mimics, lesion)
        clean[:, mimic] = contrast[EDEMA][:, None]
    noise = rng.normal(0.0, 1.0, clean.shape) * params.noise_std if params.noise_std > 0 else 0.0
    return MultiChannelImage(clean + noise), LabelMap(labels, len(CLASS_NAMES))


def generate(params: PhantomParams) -> list[tuple[MultiChannelImage, LabelMap]]:
    return [generate_subject(params, i) for i in range(params.subjects)]


# --- on-disk datasets ---------------------------------------------------------------

MANIFEST = "manifest.txt"


def write_dataset(out_dir: str | Path, data, params: PhantomParams | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"subjects = {len(data)}", f"classes = {data[0][1].n_classes}",
             f"channels = {data[0][0].channels}"]
    if params is not None:
        lines += [f"seed = {params.rng_seed}", f"size = {params.size}",
                  f"noise_sigma = {params.noise_sigma!r}",
                  f"boundary_irregularity = {params.boundary_irregularity!r}",
                  f"mimics = {params.mimics}",
                  "contrast = " + ";".join(",".join(repr(v) for v in row) for row in params.contrast)]
    for i, (img, lab) in enumerate(data):
        write_mdi(out / f"subject_{i:03d}_image.mdi", img)
        write_mdi(out / f"subject_{i:03d}_labels.mdi", lab)
        lines.append(f"subject.{i:03d} = subject_{i:03d}_image.mdi subject_{i:03d}_labels.mdi")
    (out / MANIFEST).write_text("\n".join(lines) + "\n")
    return out / MANIFEST


def read_manifest(path: str | Path) -> dict[str, str]:
    entries = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        entries[key] = value
    return entries


def read_dataset(data_dir: str | Path) -> list[tuple[MultiChannelImage, LabelMap]]:
    root = Path(data_dir)
    manifest = read_manifest(root / MANIFEST)
    keys = sorted(k for k in manifest if k.startswith("subject."))
    if not keys:
        raise ValueError(f"{root / MANIFEST}: no subject entries")
    data = []
    for key in keys:
        parts = manifest[key].split()
        if len(parts) != 2:
            raise ValueError(f"{root / MANIFEST}: entry {key} needs an image and a label file")
        img, lab = read_mdi(root / parts[0]), read_mdi(root / parts[1])
        if not isinstance(img, MultiChannelImage) or not isinstance(lab, LabelMap):
            raise ValueError(f"{root / MANIFEST}: entry {key} has wrong file kinds")
        data.append((img, lab))
    return data
