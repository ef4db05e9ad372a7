"""Network assembly: stub encoder, EFABA/GDAL fusion, deep-supervised decoder,
composite loss, Adam training step and ablation presets."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import ops
from .efaba import efaba_forward, init_efaba
from .gdal import gdal_forward, init_gdal
from .layers import Initializer, ParamStore, cbr, conv, deconv
from .tensor import GradTape, ShapeError, Tensor, backward

BASE_CHANNELS = (64, 128, 320, 512)
DEFAULT_INPUT_SIZE = 352
TOY_INPUT_SIZE = 64
TOY_CHANNEL_SCALE = 0.125
TOY_BATCH = 2
DEFAULT_BATCH = 8
DEFAULT_LR = 1e-4


@dataclass(frozen=True)
class StageSpec:
    index: int
    channels: int

    @property
    def stride(self) -> int:
        return 2 ** (self.index + 1)

    @property
    def upscale(self) -> int:
        """Upsampling factor taking the deepest stage to this stage's extent."""
        return 2 ** (4 - self.index)

    def extent(self, size: int) -> int:
        return size // self.stride


def stage_specs(channel_scale: float = 1.0) -> tuple[StageSpec, ...]:
    specs = []
    for i, c in enumerate(BASE_CHANNELS, start=1):
        scaled = int(round(c * channel_scale))
        if scaled < 4 or scaled % 4:
            raise ValueError(f"channel_scale {channel_scale} gives {scaled} channels at stage {i}; "
                             "need >= 4 and divisible by 4")
        specs.append(StageSpec(i, scaled))
    return tuple(specs)


@dataclass(frozen=True)
class NetworkConfig:
    input_size: int = DEFAULT_INPUT_SIZE
    channel_scale: float = 1.0
    enable_efaba: bool = True
    enable_gdal: bool = True
    # sub-module switches for the finer-grained ablations
    use_ecd: bool = True
    use_eal: bool = True
    use_ial: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.channel_scale <= 1:
            raise ValueError(f"channel_scale must be in (0, 1], got {self.channel_scale}")
        if self.input_size % 32:
            raise ValueError(f"input_size must be divisible by 32, got {self.input_size}")
        if self.enable_gdal and not (self.use_eal or self.use_ial):
            raise ValueError("GDAL enabled with both branches off")
        stage_specs(self.channel_scale)

    @property
    def stages(self) -> tuple[StageSpec, ...]:
        return stage_specs(self.channel_scale)

    @property
    def channels(self) -> tuple[int, int, int, int]:
        return tuple(s.channels for s in self.stages)

    @property
    def has_edge(self) -> bool:
        return self.enable_efaba and self.use_ecd


# the four main configurations, then sub-ablations of each module
ABLATIONS: dict[str, dict] = {
    "baseline": dict(enable_efaba=False, enable_gdal=False),
    "efaba": dict(enable_efaba=True, enable_gdal=False),
    "gdal": dict(enable_efaba=False, enable_gdal=True),
    "full": dict(enable_efaba=True, enable_gdal=True),
    "faba": dict(enable_efaba=True, enable_gdal=False, use_ecd=False),
    "no-ecd": dict(enable_efaba=True, enable_gdal=True, use_ecd=False),
    "eal": dict(enable_efaba=False, enable_gdal=True, use_ial=False),
    "ial": dict(enable_efaba=False, enable_gdal=True, use_eal=False),
}


def ablation_config(name: str, **overrides) -> NetworkConfig:
    if name not in ABLATIONS:
        raise KeyError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
    return NetworkConfig(**{**ABLATIONS[name], **overrides})


def toy_config(ablation: str = "full", **overrides) -> NetworkConfig:
    kw = dict(input_size=TOY_INPUT_SIZE, channel_scale=TOY_CHANNEL_SCALE)
    kw.update(overrides)
    return ablation_config(ablation, **kw)


def init_params(config: NetworkConfig) -> ParamStore:
    P = ParamStore()
    init = Initializer(P, np.random.default_rng(config.seed))
    c1, c2, c3, c4 = config.channels
    init.cbr("enc.s1.c1", c1, 3, 3)
    init.cbr("enc.s1.c2", c1, c1, 3)
    prev = c1
    for i, c in enumerate((c2, c3, c4), start=2):
        init.cbr(f"enc.s{i}.c1", c, prev, 3)
        init.cbr(f"enc.s{i}.c2", c, c, 3)
        prev = c
    if config.enable_efaba:
        init_efaba(init, (c1, c2, c3), use_ecd=config.use_ecd)
    if config.enable_gdal:
        init_gdal(init, (c1, c2, c3, c4), use_eal=config.use_eal, use_ial=config.use_ial)
    for i, c in enumerate((c1, c2, c3), start=1):
        init.cbr(f"fg{i}", c, c, 3)
    init.cbr("dec.d4", c4, c4, 3)
    chans = (c1, c2, c3, c4)
    for i in (3, 2, 1):
        init.deconv(f"dec.up{i}", chans[i], chans[i - 1], 2)
        init.cbr(f"dec.d{i}", chans[i - 1], chans[i - 1], 3)
    for i, c in enumerate(chans, start=1):
        init.conv(f"dec.head{i}", 1, c, 1)
    return P


def check_params(config: NetworkConfig, P: ParamStore) -> None:
    """Raise ``KeyError``/``ValueError`` naming the first tensor that disagrees with ``config``."""
    ref = init_params(config)
    for name, t in ref.items():
        if name not in P:
            raise KeyError(f"missing tensor {name}")
        if P[name].shape != t.shape:
            raise ValueError(f"tensor {name}: shape {P[name].shape} != expected {t.shape}")
    for name in P:
        if name not in ref:
            raise KeyError(f"unexpected tensor {name}")


@dataclass
class ForwardOutputs:
    side: tuple[Tensor, Tensor, Tensor, Tensor]
    edge: Tensor | None
    features: dict[str, Tensor] = field(default_factory=dict)

    @property
    def prediction(self) -> Tensor:
        return self.side[0]


def stub_encoder(image: Tensor, P: ParamStore) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    if image.ndim != 4 or image.shape[1] != 3:
        raise ShapeError(f"stub_encoder: expected (n, 3, H, W), got {image.shape}")
    h, w = image.shape[2:]
    if h % 32 or w % 32:
        raise ShapeError(f"stub_encoder: input {h}x{w} not divisible by 32")
    x = cbr(image, P, "enc.s1.c1", stride=2)
    x = cbr(x, P, "enc.s1.c2", stride=2)
    feats = [x]
    for i in (2, 3, 4):
        x = cbr(x, P, f"enc.s{i}.c1", stride=2)
        x = cbr(x, P, f"enc.s{i}.c2")
        feats.append(x)
    return tuple(feats)


def fuse_fg(F: Tensor, G: Tensor, P: ParamStore, name: str) -> Tensor:
    if F.shape != G.shape:
        raise ShapeError(f"fuse_fg: {F.shape} vs {G.shape}")
    return cbr(ops.add(F, G), P, name)


def decoder(fg: tuple[Tensor, Tensor, Tensor], f4: Tensor, P: ParamStore,
            out_h: int, out_w: int) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    d = cbr(f4, P, "dec.d4")
    ds = {4: d}
    for i in (3, 2, 1):
        up = deconv(d, P, f"dec.up{i}")
        if up.shape != fg[i - 1].shape:
            raise ShapeError(f"decoder: stage {i} skip {fg[i - 1].shape} vs upsampled {up.shape}")
        d = cbr(ops.add(fg[i - 1], up), P, f"dec.d{i}")
        ds[i] = d
    side = []
    for i in (1, 2, 3, 4):
        logits = conv(ds[i], P, f"dec.head{i}")
        side.append(ops.sigmoid(ops.upsample_bilinear(logits, out_h, out_w)))
    return tuple(side)


def forward(image, config: NetworkConfig, P: ParamStore, keep_features: bool = False) -> ForwardOutputs:
    image = image if isinstance(image, Tensor) else Tensor(image)
    h, w = image.shape[2:]
    f1, f2, f3, f4 = stub_encoder(image, P)
    F = (f1, f2, f3)
    edge = None
    if config.enable_efaba:
        eo = efaba_forward(f1, f2, f3, P, use_ecd=config.use_ecd)
        F = eo.features
        if eo.edge is not None:
            edge = ops.resize_bilinear(eo.edge, h, w)
    G = (f1, f2, f3)
    if config.enable_gdal:
        G = gdal_forward(f1, f2, f3, f4, P, use_eal=config.use_eal, use_ial=config.use_ial)
    fg = tuple(fuse_fg(F[i], G[i], P, f"fg{i + 1}") for i in range(3))
    side = decoder(fg, f4, P, h, w)
    feats = {}
    if keep_features:
        feats = {"f1": f1, "f2": f2, "f3": f3, "f4": f4,
                 "F1": F[0], "F2": F[1], "F3": F[2], "G1": G[0], "G2": G[1], "G3": G[2]}
    return ForwardOutputs(side, edge, feats)


def loss(out: ForwardOutputs, gt: np.ndarray, gt_edge: np.ndarray | None = None) -> Tensor:
    """Sum of per-map mean BCE over the four side outputs, plus the edge map."""
    gt = np.asarray(gt, dtype=np.float64)
    if gt.shape != out.side[0].shape:
        raise ShapeError(f"loss: ground truth {gt.shape} vs prediction {out.side[0].shape}")
    total = ops.bce(out.side[0], gt)
    for p in out.side[1:]:
        total = ops.add(total, ops.bce(p, gt))
    if out.edge is not None:
        if gt_edge is None:
            raise ValueError("loss: network emits an edge map but no edge labels were given")
        total = ops.add(total, ops.bce(out.edge, gt_edge))
    return total


def make_gt_edge(gt: np.ndarray) -> np.ndarray:
    """Morphological gradient (3x3 dilation minus 3x3 erosion) of a binary mask.

    Works on (h, w) or any (..., h, w) stack. Borders replicate, so a constant
    mask has no edge.
    """
    g = np.asarray(gt)
    if not np.isin(g, (0, 1)).all():
        raise ValueError("make_gt_edge: mask must be binary")
    g = g.astype(bool)
    lead = g.ndim - 2
    padded = np.pad(g, [(0, 0)] * lead + [(1, 1), (1, 1)], mode="edge")
    h, w = g.shape[-2:]
    dil = np.zeros_like(g)
    ero = np.ones_like(g)
    for dy in range(3):
        for dx in range(3):
            win = padded[..., dy:dy + h, dx:dx + w]
            dil |= win
            ero &= win
    return (dil & ~ero).astype(np.float64)


class Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, P: ParamStore, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in P.items():
            g = p.grad
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step
        self.value = value


def train_step(batch, config: NetworkConfig, P: ParamStore, opt: Adam, lr: float = DEFAULT_LR,
               step: int | None = None) -> float:
    """One Adam step on ``batch = (images, gts[, edges])``; returns the loss value."""
    images, gts = batch[0], batch[1]
    edges = batch[2] if len(batch) > 2 else None
    if edges is None and config.has_edge:
        edges = make_gt_edge(gts)
    P.zero_grad()
    with GradTape() as tape:
        out = forward(images, config, P)
        L = loss(out, gts, edges if config.has_edge else None)
    value = float(L.data)
    if not np.isfinite(value):
        raise NonFiniteLossError(opt.t if step is None else step, value)
    backward(tape, L)
    opt.step(P, lr)
    return value


def predict(images: np.ndarray, config: NetworkConfig, P: ParamStore, batch: int | None = None) -> np.ndarray:
    """P_1 maps for ``images`` (n, 3, H, W), evaluated in chunks of ``batch``."""
    images = np.asarray(images, dtype=np.float64)
    batch = batch or len(images)
    outs = [forward(images[i:i + batch], config, P).prediction.data
            for i in range(0, len(images), batch)]
    return np.concatenate(outs, axis=0)


def train(images: np.ndarray, gts: np.ndarray, config: NetworkConfig, steps: int,
          lr: float = DEFAULT_LR, batch: int = TOY_BATCH, P: ParamStore | None = None,
          log=None) -> tuple[ParamStore, list[float]]:
    """Cycle deterministically through ``images`` in fixed-size batches for ``steps`` steps."""
    P = init_params(config) if P is None else P
    opt = Adam()
    n = len(images)
    edges = make_gt_edge(gts)
    losses = []
    for s in range(steps):
        lo = (s * batch) % n
        idx = [(lo + k) % n for k in range(batch)]
        value = train_step((images[idx], gts[idx], edges[idx]), config, P, opt, lr, step=s)
        losses.append(value)
        if log is not None:
            log(s, value)
    return P, losses


def with_seed(config: NetworkConfig, seed: int) -> NetworkConfig:
    return replace(config, seed=seed)
