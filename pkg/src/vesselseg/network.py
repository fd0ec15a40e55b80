"""Two-stream residual encoder-decoder for artery/vein segmentation.

Topology: a stem convolution, four encoder resolutions (residual block then
stride-2 downsampling conv), three residual blocks at the bottom, and a
decoder of four (2x2 stride-2 transposed conv + residual block) stages whose
outputs receive the matching encoder residual-block output by addition. The
segmentation head is two 3x3 conv blocks plus a plain 1x1 conv producing
per-class logits (softmax is applied downstream). An optional auxiliary
decoder mirrors the main one from the bottleneck and ends in a 1x1 conv +
ReLU that reconstructs the input; it regularizes the encoder and is dropped
for transfer.

Every convolution block is conv -> ReLU -> batch norm -> dropout. Channel
widths double per resolution: base * 2^r for r in 0..4 (bottleneck at 2^4).

Parameters live in a flat name->Tensor registry. Each parameter and each
dropout layer derives its own RNG stream from (seed, crc32(name)), so adding
or removing the auxiliary stream never shifts the main stream's draws.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import CheckpointError, ConfigError, ShapeError

_MAGIC = b"VSEGCKPT"
_VERSION = 1


@dataclass
class ModelConfig:
    input_channels: int = 3
    num_classes: int = 3
    base_channels: int = 32
    num_resolutions: int = 4
    dropout_rate: float = 0.1
    aux_enabled: bool = True

    def validate(self) -> None:
        if self.input_channels < 1:
            raise ConfigError(f"input_channels must be >= 1, got {self.input_channels}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.num_resolutions != 4:
            raise ConfigError(
                f"num_resolutions is fixed at 4, got {self.num_resolutions}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(
                f"dropout_rate must be in [0, 1), got {self.dropout_rate}")


class Model:
    """Parameter registry plus batch-norm running statistics."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.bn_stats: dict[str, dict[str, np.ndarray]] = {}

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.grad = None

    def clone(self) -> "Model":
        other = Model(replace(self.config))
        for name, p in self.params.items():
            other.params[name] = Tensor(p.data.copy(), requires_grad=True, name=name)
        for name, st in self.bn_stats.items():
            other.bn_stats[name] = {k: v.copy() for k, v in st.items()}
        return other

    def __repr__(self) -> str:
        return (f"Model(base={self.config.base_channels}, "
                f"in={self.config.input_channels}, out={self.config.num_classes}, "
                f"aux={self.config.aux_enabled}, params={self.parameter_count()})")


def _layer_plan(config: ModelConfig) -> list[tuple[str, str, int, int, int]]:
    """(name, kind, c_in, c_out, k) for every weighted layer, in build order.

    kind 'conv' and 'trconv' carry bias + batch norm; 'plain' is weight+bias.
    """
    b = config.base_channels
    c = [b * 2 ** r for r in range(5)]
    plan = [("stem", "conv", config.input_channels, c[0], 3)]
    for r in range(4):
        plan.append((f"enc{r}.res.conv1", "conv", c[r], c[r], 3))
        plan.append((f"enc{r}.res.conv2", "conv", c[r], c[r], 3))
        plan.append((f"enc{r}.down", "conv", c[r], c[r + 1], 3))
    for i in range(3):
        plan.append((f"mid{i}.conv1", "conv", c[4], c[4], 3))
        plan.append((f"mid{i}.conv2", "conv", c[4], c[4], 3))
    decoders = ["dec", "aux"] if config.aux_enabled else ["dec"]
    for stream in decoders:
        for s in range(4):
            plan.append((f"{stream}{s}.up", "trconv", c[4 - s], c[3 - s], 2))
            plan.append((f"{stream}{s}.res.conv1", "conv", c[3 - s], c[3 - s], 3))
            plan.append((f"{stream}{s}.res.conv2", "conv", c[3 - s], c[3 - s], 3))
    plan.append(("head.conv1", "conv", c[0], c[0], 3))
    plan.append(("head.conv2", "conv", c[0], c[0], 3))
    plan.append(("head.out", "plain", c[0], config.num_classes, 1))
    if config.aux_enabled:
        plan.append(("aux.out", "plain", c[0], config.input_channels, 1))
    return plan


def _param_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode("ascii"))])


def _init_weight(seed: int, name: str, shape: tuple[int, ...],
                 fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return _param_rng(seed, name).uniform(-limit, limit, size=shape)


def build_model(config: ModelConfig, init_seed: int = 0) -> Model:
    """He-uniform initialized model; bit-identical for identical seeds."""
    config.validate()
    model = Model(replace(config))
    for name, kind, cin, cout, k in _layer_plan(config):
        if kind == "trconv":
            shape = (cin, cout, k, k)
        else:
            shape = (cout, cin, k, k)
        w = _init_weight(init_seed, name + ".weight", shape, cin * k * k)
        model.params[name + ".weight"] = Tensor(w, requires_grad=True,
                                                name=name + ".weight")
        model.params[name + ".bias"] = Tensor(np.zeros(cout), requires_grad=True,
                                              name=name + ".bias")
        if kind != "plain":
            model.params[name + ".gamma"] = Tensor(np.ones(cout),
                                                   requires_grad=True,
                                                   name=name + ".gamma")
            model.params[name + ".beta"] = Tensor(np.zeros(cout),
                                                  requires_grad=True,
                                                  name=name + ".beta")
            model.bn_stats[name] = {"mean": np.zeros(cout), "var": np.ones(cout)}
    return model


def _block(model: Model, name: str, t: Tensor, mode: str, entropy: list[int],
           stride: int = 1, transposed: bool = False) -> Tensor:
    p = model.params
    if transposed:
        y = ad.transposed_conv2d(t, p[name + ".weight"], p[name + ".bias"], stride=2)
    else:
        y = ad.conv2d(t, p[name + ".weight"], p[name + ".bias"],
                      stride=stride, padding=1)
    y = ad.relu(y)
    y = ad.batch_norm(y, p[name + ".gamma"], p[name + ".beta"],
                      model.bn_stats[name], mode)
    return ad.dropout(y, model.config.dropout_rate,
                      entropy + [zlib.crc32(name.encode("ascii"))], mode)


def _res(model: Model, prefix: str, t: Tensor, mode: str,
         entropy: list[int]) -> Tensor:
    y = _block(model, prefix + ".conv1", t, mode, entropy)
    y = _block(model, prefix + ".conv2", y, mode, entropy)
    return ad.add(t, y)


def forward(model: Model, batch, mode: str = "train", rng_seed=0,
            capture: dict | None = None):
    """Run the network; returns (seg_logits, recon-or-None).

    rng_seed (int or sequence of ints) feeds the per-layer dropout streams;
    reusing a seed reproduces the masks exactly. ``capture``, when given, is
    filled with named intermediate activations (plain arrays) for
    inspection.
    """
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    if x.ndim != 4:
        raise ShapeError(f"expected NCHW batch, got shape {x.shape}")
    n, cin, h, w = x.shape
    if cin != model.config.input_channels:
        raise ShapeError(
            f"batch has {cin} channels, model expects {model.config.input_channels}")
    if h % 16 or w % 16 or h < 16 or w < 16:
        raise ShapeError(
            f"spatial size {h}x{w} must be divisible by 16 (and at least 16)")
    entropy = [int(rng_seed)] if isinstance(rng_seed, (int, np.integer)) \
        else [int(v) for v in rng_seed]

    def note(key, tensor):
        if capture is not None:
            capture[key] = tensor.data

    t = _block(model, "stem", x, mode, entropy)
    skips: list[Tensor] = []
    for r in range(4):
        z = _res(model, f"enc{r}.res", t, mode, entropy)
        note(f"enc{r}.res", z)
        skips.append(z)
        t = _block(model, f"enc{r}.down", z, mode, entropy, stride=2)
    for i in range(3):
        t = _res(model, f"mid{i}", t, mode, entropy)
    note("mid", t)

    def run_decoder(stream: str, start: Tensor) -> Tensor:
        y = start
        for s in range(4):
            y = _block(model, f"{stream}{s}.up", y, mode, entropy, transposed=True)
            y = ad.add(_res(model, f"{stream}{s}.res", y, mode, entropy),
                       skips[3 - s])
            note(f"{stream}{s}.out", y)
        return y

    y = run_decoder("dec", t)
    hd = _block(model, "head.conv1", y, mode, entropy)
    hd = _block(model, "head.conv2", hd, mode, entropy)
    logits = ad.conv2d(hd, model.params["head.out.weight"],
                       model.params["head.out.bias"])

    recon = None
    if model.config.aux_enabled:
        a = run_decoder("aux", t)
        recon = ad.relu(ad.conv2d(a, model.params["aux.out.weight"],
                                  model.params["aux.out.bias"]))
    return logits, recon


def adapt_head(model: Model, new_out_channels: int, init_seed: int = 0) -> Model:
    """Transfer copy: fresh 1x1 output conv, auxiliary decoder dropped."""
    if new_out_channels < 1:
        raise ConfigError(f"new_out_channels must be >= 1, got {new_out_channels}")
    config = replace(model.config, num_classes=new_out_channels, aux_enabled=False)
    out = Model(config)
    for name, p in model.params.items():
        if name.startswith("aux") or name.startswith("head.out."):
            continue
        out.params[name] = Tensor(p.data.copy(), requires_grad=True, name=name)
    for name, st in model.bn_stats.items():
        if name.startswith("aux"):
            continue
        out.bn_stats[name] = {k: v.copy() for k, v in st.items()}
    c0 = model.config.base_channels
    w = _init_weight(init_seed, "head.out.weight", (new_out_channels, c0, 1, 1), c0)
    out.params["head.out.weight"] = Tensor(w, requires_grad=True,
                                           name="head.out.weight")
    out.params["head.out.bias"] = Tensor(np.zeros(new_out_channels),
                                         requires_grad=True, name="head.out.bias")
    return out


def _regroup_channels(old: np.ndarray, new_c: int, axis: int) -> np.ndarray:
    """Map a channel axis from C_old to C_new: group means scaled by the
    count ratio, so replicated (or averaged) inputs keep the same response."""
    old_c = old.shape[axis]
    if new_c == old_c:
        return old.copy()
    moved = np.moveaxis(old, axis, 0)
    if new_c > old_c:
        groups = [[j % old_c] for j in range(new_c)]
    else:
        groups = [[i for i in range(old_c) if i % new_c == j] for j in range(new_c)]
    scale = old_c / new_c
    stacked = np.stack([moved[g].mean(axis=0) * scale for g in groups])
    return np.moveaxis(stacked, 0, axis)


def adapt_input(model: Model, new_in_channels: int) -> Model:
    """Transfer copy accepting a different input channel count.

    Stem kernels are remapped so a channel-replicated (or channel-averaged)
    image produces the original pre-activation response. The auxiliary tail,
    if present, is remapped on its output side to stay shape-consistent.
    """
    if new_in_channels < 1:
        raise ConfigError(f"new_in_channels must be >= 1, got {new_in_channels}")
    config = replace(model.config, input_channels=new_in_channels)
    out = Model(config)
    for name, p in model.params.items():
        out.params[name] = Tensor(p.data.copy(), requires_grad=True, name=name)
    for name, st in model.bn_stats.items():
        out.bn_stats[name] = {k: v.copy() for k, v in st.items()}
    old_c = model.config.input_channels
    if new_in_channels != old_c:
        out.params["stem.weight"] = Tensor(
            _regroup_channels(model.params["stem.weight"].data, new_in_channels,
                              axis=1),
            requires_grad=True, name="stem.weight")
        if model.config.aux_enabled:
            # reconstruction head: replicate/average rows, no response scaling
            oldw = model.params["aux.out.weight"].data
            oldb = model.params["aux.out.bias"].data
            if new_in_channels > old_c:
                rows = [oldw[j % old_c] for j in range(new_in_channels)]
                bias = [oldb[j % old_c] for j in range(new_in_channels)]
            else:
                rows = [oldw[[i for i in range(old_c) if i % new_in_channels == j]]
                        .mean(axis=0) for j in range(new_in_channels)]
                bias = [oldb[[i for i in range(old_c) if i % new_in_channels == j]]
                        .mean() for j in range(new_in_channels)]
            out.params["aux.out.weight"] = Tensor(np.stack(rows),
                                                  requires_grad=True,
                                                  name="aux.out.weight")
            out.params["aux.out.bias"] = Tensor(np.array(bias),
                                                requires_grad=True,
                                                name="aux.out.bias")
    return out


# -- checkpoint format --------------------------------------------------------
#
# magic "VSEGCKPT" | u32 version | u64 json length | config json (sorted keys)
# | u32 record count | records sorted by name, each:
#   u32 name length | name (utf-8) | u8 ndim | ndim x u64 dims
#   | little-endian float64 payload


def _records(model: Model) -> list[tuple[str, np.ndarray]]:
    recs = [(name, p.data) for name, p in model.params.items()]
    for name, st in model.bn_stats.items():
        recs.append((name + ".running_mean", st["mean"]))
        recs.append((name + ".running_var", st["var"]))
    return sorted(recs)


def save_checkpoint(model: Model, path) -> None:
    cfg = json.dumps(asdict(model.config), sort_keys=True).encode("utf-8")
    recs = _records(model)
    chunks = [_MAGIC, struct.pack("<I", _VERSION),
              struct.pack("<Q", len(cfg)), cfg,
              struct.pack("<I", len(recs))]
    for name, arr in recs:
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        piece = self.blob[self.off:self.off + n]
        self.off += n
        return piece

    def u(self, fmt: str) -> int:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0]


def load_checkpoint(path) -> Model:
    with open(path, "rb") as fh:
        rd = _Reader(fh.read(), path)
    if rd.take(len(_MAGIC)) != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version = rd.u("<I")
    if version != _VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        cfg_dict = json.loads(rd.take(rd.u("<Q")).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt config block ({exc})") from exc
    want_fields = {f.name for f in fields(ModelConfig)}
    if set(cfg_dict) != want_fields:
        raise CheckpointError(
            f"{path}: config schema mismatch (got {sorted(cfg_dict)})")
    config = ModelConfig(**cfg_dict)
    try:
        config.validate()
    except ConfigError as exc:
        raise CheckpointError(f"{path}: invalid config ({exc})") from exc

    loaded: dict[str, np.ndarray] = {}
    for _ in range(rd.u("<I")):
        name = rd.take(rd.u("<I")).decode("utf-8")
        ndim = rd.u("<B")
        shape = struct.unpack(f"<{ndim}Q", rd.take(8 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(rd.take(8 * count), dtype="<f8").reshape(shape)
        loaded[name] = arr.astype(np.float64)
    if rd.off != len(rd.blob):
        raise CheckpointError(f"{path}: trailing bytes after last record")

    model = Model(config)
    for name, kind, cin, cout, k in _layer_plan(config):
        shape = (cin, cout, k, k) if kind == "trconv" else (cout, cin, k, k)
        expected = {name + ".weight": shape, name + ".bias": (cout,)}
        if kind != "plain":
            expected[name + ".gamma"] = (cout,)
            expected[name + ".beta"] = (cout,)
            stats = {}
            for stat, key in (("mean", ".running_mean"), ("var", ".running_var")):
                full = name + key
                if full not in loaded:
                    raise CheckpointError(f"{path}: missing record {full!r}")
                if loaded[full].shape != (cout,):
                    raise CheckpointError(f"{path}: bad shape for {full!r}")
                stats[stat] = loaded.pop(full).copy()
            model.bn_stats[name] = stats
        for full, shp in expected.items():
            if full not in loaded:
                raise CheckpointError(f"{path}: missing record {full!r}")
            if loaded[full].shape != shp:
                raise CheckpointError(
                    f"{path}: record {full!r} has shape {loaded[full].shape}, "
                    f"expected {shp}")
            model.params[full] = Tensor(loaded.pop(full).copy(),
                                        requires_grad=True, name=full)
    if loaded:
        raise CheckpointError(
            f"{path}: unexpected records {sorted(loaded)[:3]}")
    return model
