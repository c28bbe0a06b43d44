"""Dynamic multiscale tree: classifier nodes exchanging probability maps.

Training and prediction run the same flow protocol:

1. descend: every node (breadth first) is fit with its parent's latest maps
   as context (the root has none) and its maps are computed;
2. ascend: each parent, deepest first, fuses its children's maps by
   averaging and fits a second classifier on that fused context;
3. re-descend: every non-root node re-applies its first classifier with the
   parent's updated maps.

Steps 2-3 repeat ``rounds`` times; leaf maps are combined by majority vote.
SRF nodes read context as extra features, BN nodes as their superpixel prior.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import bn as bnmod
from . import srf as srfmod
from .bn import BnModel, BnParams
from .features import FeatureConfig
from .grid import LabelMap, MultiChannelImage, ProbabilityMap, average_maps, normalize_float32
from .oversegment import SlicParams
from .seeding import derive_seed
from .srf import ContractError, SrfForest, SrfParams

log = logging.getLogger(__name__)

KINDS = ("srf", "bn")
BASELINES = ("srf", "bn", "srf-srf", "bn-bn", "srf-bn")


# --- topology and scales ---------------------------------------------------------------

def children_of(position: str) -> tuple[str, str]:
    return f"{position}.L", f"{position}.R"


def parent_of(position: str) -> str | None:
    return None if position == "root" else position.rsplit(".", 1)[0]


def level_of(position: str) -> int:
    return position.count(".")


def positions(depth: int) -> list[str]:
    """All node positions in breadth-first order."""
    out, frontier = [], ["root"]
    for _ in range(depth + 1):
        out.extend(frontier)
        frontier = [c for p in frontier for c in children_of(p)]
    return out


@dataclass(frozen=True)
class TreeSpec:
    depth: int = 2
    kinds: tuple = ()  # ((position, kind), ...) in breadth-first order

    def __post_init__(self):
        if self.depth < 0:
            raise ValueError("depth must be >= 0")
        given = dict(self.kinds)
        full = []
        for pos in positions(self.depth):
            kind = given.pop(pos, None) or _default_kind(pos)
            if kind not in KINDS:
                raise ValueError(f"node {pos}: unknown classifier kind {kind!r}")
            full.append((pos, kind))
        if given:
            raise ValueError(f"positions outside a depth-{self.depth} tree: {sorted(given)}")
        object.__setattr__(self, "kinds", tuple(full))

    @property
    def n_nodes(self) -> int:
        return 2 ** (self.depth + 1) - 1

    def kind(self, position: str) -> str:
        return dict(self.kinds)[position]

    def positions(self) -> list[str]:
        return [p for p, _ in self.kinds]

    def leaves(self) -> list[str]:
        return [p for p in self.positions() if level_of(p) == self.depth]

    def internal(self) -> list[str]:
        return [p for p in self.positions() if level_of(p) < self.depth]


def _default_kind(position: str) -> str:
    # root SRF; every parent gets an SRF left child and a BN right child
    return "srf" if position == "root" or position.endswith(".L") else "bn"


@dataclass(frozen=True)
class ScaleEntry:
    feature_patch_side: int = 10
    label_patch_side: int = 7
    target_superpixels: int = 1000


@dataclass(frozen=True)
class ScaleSchedule:
    levels: tuple

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(
            e if isinstance(e, ScaleEntry) else ScaleEntry(*e) for e in self.levels))
        if not self.levels:
            raise ValueError("schedule needs at least one level")
        for e in self.levels:
            if e.label_patch_side > e.feature_patch_side or e.label_patch_side < 1 or e.target_superpixels < 1:
                raise ValueError(f"invalid scale entry {e}")

    @classmethod
    def multiscale(cls, depth: int) -> "ScaleSchedule":
        coarse, fine = ScaleEntry(10, 7, 1000), ScaleEntry(8, 5, 1200)
        return cls(tuple(coarse if lvl < 2 else fine for lvl in range(depth + 1)))

    @classmethod
    def fixed(cls, depth: int, entry: ScaleEntry = ScaleEntry()) -> "ScaleSchedule":
        return cls((entry,) * (depth + 1))

    def at(self, level: int) -> ScaleEntry:
        if level >= len(self.levels):
            raise ValueError(f"schedule has no entry for level {level}")
        return self.levels[level]


@dataclass(frozen=True)
class DmtConfig:
    n_classes: int = 4
    srf: SrfParams = field(default_factory=SrfParams)
    bn: BnParams = field(default_factory=BnParams)
    slic: SlicParams = field(default_factory=SlicParams)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    rounds: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        object.__setattr__(self, "features", replace(self.features, context_classes=self.n_classes))


# --- node classifiers ------------------------------------------------------------------------

@dataclass(eq=False)
class NodeClassifier:
    kind: str
    scale: ScaleEntry
    model: SrfForest | BnModel
    uses_context: bool
    features: FeatureConfig
    key: str = ""

    def predict(self, img: MultiChannelImage, context: ProbabilityMap | None) -> ProbabilityMap:
        if self.kind == "srf":
            ctx = context if self.uses_context else None
            if self.uses_context and context is None:
                raise ContractError("this forest was trained with a context map")
            return srfmod.srf_predict(self.model, img, ctx, self.features)
        return bnmod.bn_predict(self.model, img, context, self.features)

    def to_bytes(self) -> bytes:
        if self.kind == "srf":
            return srfmod.forest_to_bytes(self.model)
        return bnmod.model_to_bytes(self.model)


def _digest_maps(maps) -> str:
    if maps is None:
        return "none"
    h = hashlib.blake2b(digest_size=16)
    for m in maps:
        h.update(m.digest().encode())
    return h.hexdigest()


def _digest_data(data) -> str:
    h = hashlib.blake2b(digest_size=16)
    for img, lab in data:
        h.update(img.digest().encode())
        h.update(lab.digest().encode())
    return h.hexdigest()


class FitCache:
    """Memo of fitted classifiers and their maps, shared by methods within one fold."""

    def __init__(self):
        self.fits: dict = {}
        self.maps: dict = {}
        self.hits = 0

    def fit(self, key, factory):
        if key in self.fits:
            self.hits += 1
            return self.fits[key]
        value = self.fits[key] = factory()
        return value

    def predict(self, node: NodeClassifier, img: MultiChannelImage, context):
        key = (node.key, img.digest(), None if context is None else context.digest())
        if key not in self.maps:
            self.maps[key] = node.predict(img, context)
        return self.maps[key]


def fit_node(kind: str, scale: ScaleEntry, data, contexts, cfg: DmtConfig, tag: str,
             cache: FitCache | None = None) -> NodeClassifier:
    """Fit one SRF or BN classifier at ``scale``.

    SRF seeds come from the node tag; BN likelihoods do not see context, so
    their seed depends only on the superpixel scale and equal BN fits are
    shared between nodes.
    """
    if kind == "srf":
        seed = derive_seed(cfg.seed, f"srf:{tag}")
        params = replace(cfg.srf, feature_patch_side=scale.feature_patch_side,
                         label_patch_side=scale.label_patch_side, rng_seed=seed)
        key = ("srf", params, cfg.features.bank_key(), cfg.n_classes, _digest_data(data), _digest_maps(contexts))

        def build():
            forest = srfmod.fit_forest(data, contexts, params, cfg.features, cfg.n_classes)
            return NodeClassifier("srf", scale, forest, contexts is not None, cfg.features, _key_str(key))
    elif kind == "bn":
        seed = derive_seed(cfg.seed, f"bn:{scale.target_superpixels}")
        params = replace(cfg.bn, rng_seed=seed)
        slic = replace(cfg.slic, target_superpixels=scale.target_superpixels)
        key = ("bn", params, slic, cfg.features.bank_key(), cfg.n_classes, _digest_data(data))

        def build():
            model = bnmod.fit_bn(data, cfg.n_classes, params, slic, cfg.features)
            return NodeClassifier("bn", scale, model, contexts is not None, cfg.features, _key_str(key))
    else:
        raise ValueError(f"unknown classifier kind {kind!r}")
    node = cache.fit(key, build) if cache is not None else build()
    if kind == "bn" and node.uses_context != (contexts is not None):
        node = replace(node, uses_context=contexts is not None)
    return node


def _key_str(key) -> str:
    return hashlib.blake2b(repr(key).encode(), digest_size=16).hexdigest()


def _apply(node: NodeClassifier, img, context, cache: FitCache | None) -> ProbabilityMap:
    if cache is not None:
        return cache.predict(node, img, context)
    return node.predict(img, context)


# --- trained tree ----------------------------------------------------------------------------

@dataclass
class TrainedNode:
    position: str
    kind: str
    scale: ScaleEntry
    phase_a: NodeClassifier
    phase_b: list = field(default_factory=list)  # one per round; empty at leaves


@dataclass
class TrainedDmt:
    spec: TreeSpec
    schedule: ScaleSchedule
    nodes: dict
    config: DmtConfig
    channels: int
    audit: list = field(default_factory=list)

    @property
    def rounds(self) -> int:
        return self.config.rounds

    @property
    def n_classes(self) -> int:
        return self.config.n_classes

    def flow(self, img: MultiChannelImage, cache: FitCache | None = None,
             record=None) -> dict[str, ProbabilityMap]:
        """Run the flow protocol on one image; returns every node's final map."""
        if img.channels != self.channels:
            raise ContractError(f"model was trained on {self.channels}-channel images")
        return _run_flows(self.spec, img, self.nodes, self.rounds, cache, record)

    def predict(self, img: MultiChannelImage, cache: FitCache | None = None):
        maps = self.flow(img, cache)
        return majority_vote([maps[p] for p in self.spec.leaves()])


def _run_flows(spec: TreeSpec, img, nodes: dict, rounds: int, cache, record=None) -> dict:
    maps = {}
    for pos in spec.positions():
        parent = parent_of(pos)
        maps[pos] = _apply(nodes[pos].phase_a, img, None if parent is None else maps[parent], cache)
        if record is not None:
            record("fit_a", pos, None)
    for r in range(rounds):
        for pos in sorted(spec.internal(), key=level_of, reverse=True):
            left, right = children_of(pos)
            fused = fuse_children(maps[left], maps[right])
            maps[pos] = _apply(nodes[pos].phase_b[r], img, fused, cache)
            if record is not None:
                record("fit_b", pos, r)
        for pos in spec.positions()[1:]:
            maps[pos] = _apply(nodes[pos].phase_a, img, maps[parent_of(pos)], cache)
            if record is not None:
                record("repass", pos, r)
    return maps


def fuse_children(left: ProbabilityMap, right: ProbabilityMap) -> ProbabilityMap:
    return average_maps([left, right])


def majority_vote(leaf_maps: list[ProbabilityMap]) -> tuple[LabelMap, ProbabilityMap]:
    """Per-pixel majority over leaf argmax labels.

    Ties go to the tied class with the largest summed leaf posterior, then to
    the lowest class id.  The probability output is the mean leaf map.
    """
    if len(leaf_maps) == 1:
        only = leaf_maps[0]
        return LabelMap(np.argmax(only.values, axis=0), only.n_classes), only
    stack = np.stack([m.values for m in leaf_maps]).astype(np.float64)  # (n_leaves, L, H, W)
    n_classes = stack.shape[1]
    votes = np.stack([(np.argmax(stack, axis=1) == k).sum(axis=0) for k in range(n_classes)])
    summed = stack.sum(axis=0)
    top = votes == votes.max(axis=0, keepdims=True)
    score = np.where(top, summed, -np.inf)
    labels = np.argmax(score, axis=0)
    mean = ProbabilityMap(normalize_float32(summed / len(leaf_maps)))
    return LabelMap(labels, n_classes), mean


def _check_dataset(data, n_classes: int):
    if not data:
        raise ValueError("dataset is empty")
    channels = data[0][0].channels
    for img, lab in data:
        if img.channels != channels:
            raise ValueError("all images must share one channel count")
        if lab.shape != img.shape:
            raise ValueError("label map and image sizes differ")
        if lab.n_classes != n_classes or (lab.labels.size and lab.labels.max() >= n_classes):
            raise ValueError(f"labels must lie in [0, {n_classes})")
    return channels


def dmt_train(dataset, spec: TreeSpec, schedule: ScaleSchedule, cfg: DmtConfig,
              cache: FitCache | None = None) -> TrainedDmt:
    channels = _check_dataset(dataset, cfg.n_classes)
    imgs = [img for img, _ in dataset]
    audit = []
    nodes: dict[str, TrainedNode] = {}
    maps: dict[str, list[ProbabilityMap]] = {}

    def scale_of(pos):
        return schedule.at(level_of(pos))

    for pos in spec.positions():
        parent = parent_of(pos)
        ctx = None if parent is None else maps[parent]
        clf = fit_node(spec.kind(pos), scale_of(pos), dataset, ctx, cfg, f"{pos}:A", cache)
        nodes[pos] = TrainedNode(pos, spec.kind(pos), scale_of(pos), clf)
        audit.append({"event": "fit_a", "position": pos, "kind": spec.kind(pos), "round": None,
                      "scale": list(asdict(scale_of(pos)).values())})
        maps[pos] = [_apply(clf, img, None if ctx is None else ctx[i], cache) for i, img in enumerate(imgs)]
        log.debug("fit phase A at %s (%s)", pos, spec.kind(pos))
    for r in range(cfg.rounds):
        for pos in sorted(spec.internal(), key=level_of, reverse=True):
            left, right = children_of(pos)
            fused = [fuse_children(a, b) for a, b in zip(maps[left], maps[right])]
            clf = fit_node(spec.kind(pos), scale_of(pos), dataset, fused, cfg, f"{pos}:B{r}", cache)
            nodes[pos].phase_b.append(clf)
            audit.append({"event": "fit_b", "position": pos, "kind": spec.kind(pos), "round": r,
                          "scale": list(asdict(scale_of(pos)).values())})
            maps[pos] = [_apply(clf, img, fused[i], cache) for i, img in enumerate(imgs)]
        for pos in spec.positions()[1:]:
            ctx = maps[parent_of(pos)]
            maps[pos] = [_apply(nodes[pos].phase_a, img, ctx[i], cache) for i, img in enumerate(imgs)]
            audit.append({"event": "repass", "position": pos, "kind": spec.kind(pos), "round": r,
                          "scale": list(asdict(scale_of(pos)).values())})
    for pos in spec.leaves():
        audit.append({"event": "leaf_maps", "position": pos,
                      "digests": [m.digest() for m in maps[pos]]})
    return TrainedDmt(spec, schedule, nodes, cfg, channels, audit)


def expected_fit_events(depth: int, rounds: int) -> int:
    return (2 ** (depth + 1) - 1) + rounds * (2 ** depth - 1) + rounds * (2 ** (depth + 1) - 2)


def count_events(audit: list) -> dict[str, int]:
    out = {"fit_a": 0, "fit_b": 0, "repass": 0}
    for e in audit:
        if e["event"] in out:
            out[e["event"]] += 1
    return out


# --- cascade baselines ----------------------------------------------------------------------

@dataclass
class CascadeModel:
    """Unidirectional chain: each stage consumes the previous stage's posterior."""

    name: str
    stages: list
    config: DmtConfig
    channels: int

    def predict(self, img: MultiChannelImage, cache: FitCache | None = None):
        if img.channels != self.channels:
            raise ContractError(f"model was trained on {self.channels}-channel images")
        ctx = None
        for stage in self.stages:
            ctx = _apply(stage, img, ctx, cache)
        return LabelMap(np.argmax(ctx.values, axis=0), ctx.n_classes), ctx


_CHAIN_POSITIONS = ("root", "root.L")


def build_baseline(kind: str, schedule: ScaleSchedule | None = None):
    """Return a trainer ``fn(dataset, cfg, cache=None) -> CascadeModel`` for a baseline name."""
    if kind not in BASELINES:
        raise ValueError(f"unknown baseline {kind!r}; expected one of {', '.join(BASELINES)}")
    chain = kind.split("-")
    sched = schedule or ScaleSchedule.multiscale(len(chain) - 1)

    def train(dataset, cfg: DmtConfig, cache: FitCache | None = None) -> CascadeModel:
        channels = _check_dataset(dataset, cfg.n_classes)
        imgs = [img for img, _ in dataset]
        stages, ctx = [], None
        for i, stage_kind in enumerate(chain):
            clf = fit_node(stage_kind, sched.at(i), dataset, ctx, cfg, f"{_CHAIN_POSITIONS[i]}:A", cache)
            stages.append(clf)
            if i + 1 < len(chain):
                ctx = [_apply(clf, img, None if ctx is None else ctx[j], cache) for j, img in enumerate(imgs)]
        return CascadeModel(kind, stages, cfg, channels)

    return train


# --- persistence --------------------------------------------------------------------------

MODEL_MANIFEST = "manifest.json"


def _config_dict(cfg: DmtConfig) -> dict:
    return {"n_classes": cfg.n_classes, "rounds": cfg.rounds, "seed": cfg.seed,
            "srf": asdict(cfg.srf), "bn": asdict(cfg.bn), "slic": asdict(cfg.slic),
            "features": asdict(cfg.features)}


def _config_from_dict(d: dict) -> DmtConfig:
    feats = d["features"]
    feats["dog_sigma_pairs"] = tuple(tuple(p) for p in feats["dog_sigma_pairs"])
    return DmtConfig(d["n_classes"], SrfParams(**d["srf"]), BnParams(**d["bn"]), SlicParams(**d["slic"]),
                     FeatureConfig(**feats), d["rounds"], d["seed"])


def _node_blob_name(pos: str, phase: str, kind: str) -> str:
    return f"{pos}.{phase}.{kind}"


def save_model(model: TrainedDmt | CascadeModel, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    blobs = []

    def put(name: str, clf: NodeClassifier):
        data = clf.to_bytes()
        (out / name).write_bytes(data)
        blobs.append({"file": name, "kind": clf.kind, "uses_context": clf.uses_context,
                      "scale": list(asdict(clf.scale).values()),
                      "sha256": hashlib.sha256(data).hexdigest(),
                      "fingerprint": getattr(clf.model, "fingerprint", None)})

    if isinstance(model, TrainedDmt):
        manifest = {"method": "dmt", "depth": model.spec.depth, "kinds": [list(k) for k in model.spec.kinds],
                    "schedule": [list(asdict(e).values()) for e in model.schedule.levels],
                    "audit": model.audit}
        for pos in model.spec.positions():
            node = model.nodes[pos]
            put(_node_blob_name(pos, "A", node.kind), node.phase_a)
            for r, clf in enumerate(node.phase_b):
                put(_node_blob_name(pos, f"B{r}", node.kind), clf)
    else:
        manifest = {"method": model.name, "audit": []}
        for i, clf in enumerate(model.stages):
            put(_node_blob_name(f"stage{i}", "A", clf.kind), clf)
    manifest["config"] = _config_dict(model.config)
    manifest["channels"] = model.channels
    manifest["blobs"] = blobs
    path = out / MODEL_MANIFEST
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def load_model(model_dir: str | Path) -> TrainedDmt | CascadeModel:
    root = Path(model_dir)
    manifest = json.loads((root / MODEL_MANIFEST).read_text())
    cfg = _config_from_dict(manifest["config"])
    loaded = {}
    for b in manifest["blobs"]:
        data = (root / b["file"]).read_bytes()
        if hashlib.sha256(data).hexdigest() != b["sha256"]:
            raise ContractError(f"blob {b['file']} does not match its manifest checksum")
        if b["kind"] == "srf":
            model = srfmod.forest_from_bytes(data, b["fingerprint"])
        else:
            model = bnmod.model_from_bytes(data)
        loaded[b["file"]] = NodeClassifier(b["kind"], ScaleEntry(*b["scale"]), model, b["uses_context"],
                                           cfg.features, hashlib.sha256(data).hexdigest())
    if manifest["method"] != "dmt":
        stages = [loaded[b["file"]] for b in manifest["blobs"]]
        return CascadeModel(manifest["method"], stages, cfg, manifest["channels"])
    spec = TreeSpec(manifest["depth"], tuple(tuple(k) for k in manifest["kinds"]))
    schedule = ScaleSchedule(tuple(ScaleEntry(*e) for e in manifest["schedule"]))
    nodes = {}
    for pos in spec.positions():
        kind = spec.kind(pos)
        phase_b = []
        r = 0
        while _node_blob_name(pos, f"B{r}", kind) in loaded:
            phase_b.append(loaded[_node_blob_name(pos, f"B{r}", kind)])
            r += 1
        nodes[pos] = TrainedNode(pos, kind, schedule.at(level_of(pos)),
                                 loaded[_node_blob_name(pos, "A", kind)], phase_b)
    return TrainedDmt(spec, schedule, nodes, cfg, manifest["channels"], manifest["audit"])


# --- named methods ---------------------------------------------------------------------------

METHODS = ("dmt", "dmt-fixed") + BASELINES


def method_trainer(name: str, cfg: DmtConfig, spec: TreeSpec | None = None,
                   schedule: ScaleSchedule | None = None):
    """Trainer ``fn(dataset, cache=None)`` for a method name.

    ``dmt-fixed`` reuses the level-0 scale at every level.  Baseline stages
    take the scales of the matching tree levels so their fits coincide with
    the tree's own first-pass fits.
    """
    spec = spec or TreeSpec(2)
    schedule = schedule or ScaleSchedule.multiscale(spec.depth)
    if name == "dmt":
        return lambda data, cache=None: dmt_train(data, spec, schedule, cfg, cache)
    if name == "dmt-fixed":
        fixed = ScaleSchedule.fixed(spec.depth, schedule.at(0))
        return lambda data, cache=None: dmt_train(data, spec, fixed, cfg, cache)
    if name not in BASELINES:
        raise ValueError(f"unknown method {name!r}; expected one of {', '.join(METHODS)}")
    levels = schedule.levels + (schedule.levels[-1],)
    base = build_baseline(name, ScaleSchedule(levels[:2]))
    return lambda data, cache=None: base(data, cfg, cache)
