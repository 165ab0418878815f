"""RTNet: grouped residual pyramid forecaster with decoupled time embedding.

The backbone halves sequence length and doubles channels per block, so total
feature width is invariant in depth.  A causal pyramid runs one extractor per
block depth, extractor i seeing only the last half of what extractor i-1 saw.
Predictions come from a grouped linear head; calendar information enters only
through a separate stride-1 network over the prediction window's time marks.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, ContractError, DataError, DimensionError
from .norm import (NORM_KINDS, BatchNormParams, LayerNormParams, WeightNormParam,
                   batch_norm, layer_norm, weight_norm_effective)
from .tensor import (Tensor, add, channel_upsample, concat, conv1d_grouped, detach,
                     dropout, linear_grouped, maxpool1d, relu, reshape, transpose_12)

CHECKPOINT_MAGIC = b"RTNET1"
TIME_MODES = ("decoupled", "input", "none")


@dataclass
class ModelConfig:
    l_in: int
    l_out: int
    n_variates: int
    d_channels: int
    blocks: int = 3
    groups: int = 1
    n_time: int = 6
    time_mode: str = "none"
    theta_degrees: float = 45.0
    norm_kind: str = "wn"
    dropout: float = 0.1
    kernel: int = 3

    def validate(self) -> None:
        if self.blocks < 1:
            raise ConfigError(f"blocks must be >= 1, got {self.blocks}")
        if self.l_in % (1 << self.blocks):
            raise ConfigError(f"l_in={self.l_in} must be divisible by 2^blocks={1 << self.blocks}")
        if self.l_out < 1:
            raise ConfigError(f"l_out must be >= 1, got {self.l_out}")
        if self.groups not in (1, self.n_variates):
            raise ConfigError(f"groups must be 1 or n_variates={self.n_variates}, got {self.groups}")
        if self.d_channels % self.groups:
            raise ConfigError(f"d_channels={self.d_channels} must be divisible by groups={self.groups}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"kernel must be odd and >= 1, got {self.kernel}")
        if self.norm_kind not in NORM_KINDS:
            raise ConfigError(f"norm_kind must be one of {NORM_KINDS}, got {self.norm_kind!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.time_mode not in TIME_MODES:
            raise ConfigError(f"time_mode must be one of {TIME_MODES}, got {self.time_mode!r}")
        if self.time_mode != "none" and self.n_time < 1:
            raise ConfigError("time features enabled but n_time < 1")
        if not 0.0 <= self.theta_degrees <= 90.0:
            raise ConfigError(f"theta_degrees must lie in [0, 90], got {self.theta_degrees}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg


class ConvUnit:
    """Grouped convolution with the model's normalization scheme attached.

    Weight norm reparameterizes the kernel; batch/layer norm follow the
    convolution output.  ``post_norm=False`` marks projection heads, which
    keep weight norm but never normalize their outputs.
    """

    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int, groups: int,
                 norm_kind: str, rng: np.random.Generator, post_norm: bool = True):
        self.stride = stride
        self.padding = kernel // 2
        self.groups = groups
        self.norm_kind = norm_kind
        cpg = c_in // groups
        w0 = rng.normal(0.0, np.sqrt(2.0 / (cpg * kernel)), (c_out, cpg, kernel))
        self.wn = WeightNormParam.from_weight(w0) if norm_kind == "wn" else None
        self.weight = None if self.wn else Tensor(w0, requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)
        self.bn = BatchNormParams.create(c_out) if (post_norm and norm_kind == "bn") else None
        self.ln = LayerNormParams.create(c_out) if (post_norm and norm_kind == "ln") else None

    def effective_weight(self) -> Tensor:
        return weight_norm_effective(self.wn) if self.wn else self.weight

    def forward(self, x: Tensor, training: bool) -> Tensor:
        y = conv1d_grouped(x, self.effective_weight(), self.bias,
                           stride=self.stride, padding=self.padding, groups=self.groups)
        if self.bn is not None:
            y = batch_norm(y, self.bn, training)
        if self.ln is not None:
            y = layer_norm(y, self.ln)
        return y

    def named_parameters(self, prefix: str):
        if self.wn:
            yield prefix + ".v", self.wn.v
            yield prefix + ".g", self.wn.g
        else:
            yield prefix + ".weight", self.weight
        yield prefix + ".bias", self.bias
        if self.bn is not None:
            yield prefix + ".bn.gamma", self.bn.gamma
            yield prefix + ".bn.beta", self.bn.beta
        if self.ln is not None:
            yield prefix + ".ln.gain", self.ln.gain
            yield prefix + ".ln.bias", self.ln.bias

    def named_buffers(self, prefix: str):
        if self.bn is not None:
            yield prefix + ".bn.running_mean", self.bn.running_mean
            yield prefix + ".bn.running_var", self.bn.running_var


class LinearUnit:
    """Grouped affine projection with optional weight-norm reparameterization."""

    def __init__(self, f_in: int, f_out: int, groups: int, norm_kind: str,
                 rng: np.random.Generator):
        self.groups = groups
        fpg = f_in // groups
        w0 = rng.normal(0.0, np.sqrt(1.0 / fpg), (f_out, fpg))
        self.wn = WeightNormParam.from_weight(w0) if norm_kind == "wn" else None
        self.weight = None if self.wn else Tensor(w0, requires_grad=True)
        self.bias = Tensor(np.zeros(f_out), requires_grad=True)

    def effective_weight(self) -> Tensor:
        return weight_norm_effective(self.wn) if self.wn else self.weight

    def forward(self, x: Tensor) -> Tensor:
        return linear_grouped(x, self.effective_weight(), self.bias, groups=self.groups)

    def named_parameters(self, prefix: str):
        if self.wn:
            yield prefix + ".v", self.wn.v
            yield prefix + ".g", self.wn.g
        else:
            yield prefix + ".weight", self.weight
        yield prefix + ".bias", self.bias


class RTBlock:
    """Residual block: halve the sequence, double the channels.

    Main path: strided conv -> norm -> relu -> conv -> norm.  Shortcut:
    maxpool + channel repetition, so the residual sum needs no projection.
    """

    def __init__(self, c_in: int, kernel: int, groups: int, norm_kind: str,
                 drop_rate: float, rng: np.random.Generator, stride: int = 2):
        self.kernel = kernel
        self.stride = stride
        self.groups = groups
        self.drop_rate = drop_rate
        self.conv1 = ConvUnit(c_in, 2 * c_in, kernel, stride, groups, norm_kind, rng)
        self.conv2 = ConvUnit(2 * c_in, 2 * c_in, kernel, 1, groups, norm_kind, rng)

    def forward(self, x: Tensor, training: bool, rng: np.random.Generator | None) -> Tensor:
        if self.stride == 2 and x.data.shape[2] % 2:
            raise ConfigError(f"RTBlock needs an even sequence length, got {x.data.shape[2]}")
        h = relu(self.conv1.forward(x, training))
        h = dropout(h, self.drop_rate, rng, training)
        h = self.conv2.forward(h, training)
        s = maxpool1d(x, self.kernel, self.stride, self.kernel // 2)
        s = channel_upsample(s, 2, self.groups)
        y = relu(add(h, s))
        return dropout(y, self.drop_rate, rng, training)

    def named_parameters(self, prefix: str):
        yield from self.conv1.named_parameters(prefix + ".conv1")
        yield from self.conv2.named_parameters(prefix + ".conv2")

    def named_buffers(self, prefix: str):
        yield from self.conv1.named_buffers(prefix + ".conv1")
        yield from self.conv2.named_buffers(prefix + ".conv2")


class Branch:
    """One pyramid extractor: private embedding plus a stack of RTBlocks."""

    def __init__(self, c_in: int, depth: int, cfg: "ModelConfig", rng: np.random.Generator):
        self.embed = ConvUnit(c_in, cfg.d_channels, cfg.kernel, 1, cfg.groups,
                              cfg.norm_kind, rng)
        self.blocks = [RTBlock(cfg.d_channels << j, cfg.kernel, cfg.groups,
                               cfg.norm_kind, cfg.dropout, rng)
                       for j in range(depth)]

    def forward(self, x: Tensor, training: bool, rng) -> Tensor:
        h = self.embed.forward(x, training)
        for block in self.blocks:
            h = block.forward(h, training, rng)
        return h

    def named_parameters(self, prefix: str):
        yield from self.embed.named_parameters(prefix + ".embed")
        for j, block in enumerate(self.blocks):
            yield from block.named_parameters(f"{prefix}.block{j}")

    def named_buffers(self, prefix: str):
        yield from self.embed.named_buffers(prefix + ".embed")
        for j, block in enumerate(self.blocks):
            yield from block.named_buffers(f"{prefix}.block{j}")


class TimeNet:
    """Stride-1 extractor over prediction-window calendar marks."""

    def __init__(self, cfg: "ModelConfig", rng: np.random.Generator):
        c_in = cfg.n_time * cfg.groups
        self.embed = ConvUnit(c_in, cfg.d_channels, cfg.kernel, 1, cfg.groups,
                              cfg.norm_kind, rng)
        self.blocks = [RTBlock(cfg.d_channels << j, cfg.kernel, cfg.groups,
                               cfg.norm_kind, cfg.dropout, rng, stride=1)
                       for j in range(2)]

    def forward(self, marks: Tensor, training: bool, rng) -> Tensor:
        h = self.embed.forward(marks, training)
        for block in self.blocks:
            h = block.forward(h, training, rng)
        return h

    def named_parameters(self, prefix: str):
        yield from self.embed.named_parameters(prefix + ".embed")
        for j, block in enumerate(self.blocks):
            yield from block.named_parameters(f"{prefix}.block{j}")

    def named_buffers(self, prefix: str):
        yield from self.embed.named_buffers(prefix + ".embed")
        for j, block in enumerate(self.blocks):
            yield from block.named_buffers(f"{prefix}.block{j}")


def features_per_group(cfg: ModelConfig) -> int:
    """Width of one group's concatenated pyramid features."""
    per_branch = cfg.l_in * cfg.d_channels // cfg.groups
    return sum(per_branch >> i for i in range(cfg.blocks))


class RTNet:
    """The full forecaster; ``relation`` is a frozen processed mixing matrix or None."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator,
                 relation: np.ndarray | None = None):
        cfg.validate()
        self.cfg = cfg
        if relation is not None:
            relation = np.asarray(relation, dtype=np.float64)
            if relation.shape != (cfg.n_variates, cfg.n_variates):
                raise DimensionError(f"relation matrix {relation.shape} does not match "
                                     f"N={cfg.n_variates}")
        self.relation = relation
        self.cpn_frozen = False

        per_group_in = cfg.n_variates // cfg.groups
        if cfg.time_mode == "input":
            per_group_in += cfg.n_time
        self.branches = [Branch(per_group_in * cfg.groups, cfg.blocks - i, cfg, rng)
                         for i in range(cfg.blocks)]
        self.head_linear = LinearUnit(cfg.groups * features_per_group(cfg),
                                      cfg.l_out * cfg.n_variates, cfg.groups,
                                      cfg.norm_kind, rng)
        if cfg.time_mode == "decoupled":
            self.timenet = TimeNet(cfg, rng)
            self.head_time = ConvUnit(4 * cfg.d_channels, cfg.n_variates, 1, 1,
                                      cfg.groups, cfg.norm_kind, rng, post_norm=False)
        else:
            self.timenet = None
            self.head_time = None

    # -- input assembly (numpy; gradients are tracked w.r.t. parameters) -----

    def _assemble_channels(self, window: np.ndarray,
                           input_marks: np.ndarray | None) -> np.ndarray:
        """(B, L, N) window -> (B, C, L) channels, marks interleaved per group."""
        x = window.transpose(0, 2, 1)
        if self.cfg.time_mode != "input":
            return np.ascontiguousarray(x)
        if input_marks is None:
            raise DimensionError("time_mode='input' requires input-window marks")
        marks = input_marks.transpose(0, 2, 1)
        g = self.cfg.groups
        npg = self.cfg.n_variates // g
        pieces = []
        for gi in range(g):
            pieces.append(x[:, gi * npg:(gi + 1) * npg])
            pieces.append(marks)
        return np.ascontiguousarray(np.concatenate(pieces, axis=1))

    def _prepare_input(self, inputs: np.ndarray,
                       input_marks: np.ndarray | None) -> np.ndarray:
        cfg = self.cfg
        if inputs.ndim != 3 or inputs.shape[1] != cfg.l_in or inputs.shape[2] != cfg.n_variates:
            raise DimensionError(f"inputs must be (B, {cfg.l_in}, {cfg.n_variates}), "
                                 f"got {inputs.shape}")
        if self.relation is not None:
            inputs = inputs @ self.relation
        return self._assemble_channels(inputs, input_marks)

    def representations(self, inputs: np.ndarray, *, training: bool = False,
                        rng: np.random.Generator | None = None,
                        input_marks: np.ndarray | None = None) -> Tensor:
        """Per-group pyramid features, (B, groups, features_per_group)."""
        cfg = self.cfg
        x = self._prepare_input(np.asarray(inputs, dtype=np.float64), input_marks)
        batch = x.shape[0]
        feats = []
        for i, branch in enumerate(self.branches):
            sliced = x[:, :, x.shape[2] - (cfg.l_in >> i):]
            h = branch.forward(Tensor(np.ascontiguousarray(sliced)), training, rng)
            b, c, length = h.data.shape
            feats.append(reshape(h, (batch, cfg.groups, (c // cfg.groups) * length)))
        return concat(feats, axis=2)

    def forward(self, inputs: np.ndarray, marks: np.ndarray | None = None, *,
                training: bool = False, rng: np.random.Generator | None = None,
                detach_features: bool = False,
                input_marks: np.ndarray | None = None) -> Tensor:
        """Predict (B, l_out, N).  ``detach_features`` severs the pyramid for stage 2."""
        cfg = self.cfg
        if detach_features and training and not self.cpn_frozen:
            raise ContractError("stage-2 training requires freeze_cpn() first")
        feat = self.representations(inputs, training=training, rng=rng,
                                    input_marks=input_marks)
        if detach_features:
            feat = detach(feat)
        batch = feat.data.shape[0]
        flat = reshape(feat, (batch, feat.data.shape[1] * feat.data.shape[2]))
        ar = self.head_linear.forward(flat)
        out = transpose_12(reshape(ar, (batch, cfg.n_variates, cfg.l_out)))

        if self.timenet is not None:
            if marks is None:
                raise DimensionError("time_mode='decoupled' requires prediction-window marks")
            marks = np.asarray(marks, dtype=np.float64)
            if marks.shape != (batch, cfg.l_out, cfg.n_time):
                raise DimensionError(f"marks must be (B, {cfg.l_out}, {cfg.n_time}), "
                                     f"got {marks.shape}")
            tiled = np.ascontiguousarray(
                np.tile(marks, (1, 1, cfg.groups)).transpose(0, 2, 1))
            t = self.timenet.forward(Tensor(tiled), training, rng)
            t_out = transpose_12(self.head_time.forward(t, training))
            out = add(out, t_out)
        return out

    # -- parameter plumbing ---------------------------------------------------

    def named_parameters(self):
        yield from self.cpn_named_parameters()
        yield from self.head_named_parameters()

    def cpn_named_parameters(self):
        for i, branch in enumerate(self.branches):
            yield from branch.named_parameters(f"cpn.branch{i}")

    def head_named_parameters(self):
        yield from self.head_linear.named_parameters("head.linear")
        if self.timenet is not None:
            yield from self.timenet.named_parameters("timenet")
            yield from self.head_time.named_parameters("head.time")

    def named_buffers(self):
        for i, branch in enumerate(self.branches):
            yield from branch.named_buffers(f"cpn.branch{i}")
        if self.timenet is not None:
            yield from self.timenet.named_buffers("timenet")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def freeze_cpn(self) -> None:
        for _, p in self.cpn_named_parameters():
            p.requires_grad = False
        self.cpn_frozen = True

    def state_checksum(self, names: set[str] | None = None) -> float:
        total = 0.0
        for name, p in self.named_parameters():
            if names is None or name in names:
                total += float(np.abs(p.data).sum())
        return total


# ---------------------------------------------------------------------------
# checkpoints: magic, JSON header, raw float64 buffers
# ---------------------------------------------------------------------------

def save_checkpoint(model: RTNet, path: str) -> None:
    arrays: list[tuple[str, np.ndarray]] = [(n, p.data) for n, p in model.named_parameters()]
    arrays += [(n, b) for n, b in model.named_buffers()]
    if model.relation is not None:
        arrays.append(("relation", model.relation))
    header = {
        "config": model.cfg.to_dict(),
        "has_relation": model.relation is not None,
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype=np.float64).tobytes())


def load_checkpoint(path: str) -> RTNet:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise DataError(f"{path}: not an RTNET1 checkpoint (magic {magic!r})")
        (blob_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(blob_len).decode("utf-8"))
        payload = fh.read()
    cfg = ModelConfig.from_dict(header["config"])
    values: dict[str, np.ndarray] = {}
    cursor = 0
    for entry in header["arrays"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(payload, dtype=np.float64, count=n, offset=cursor)
        values[entry["name"]] = arr.reshape(entry["shape"]).copy()
        cursor += n * 8
    relation = values.pop("relation", None) if header["has_relation"] else None
    model = RTNet(cfg, np.random.default_rng(0), relation=relation)
    for name, p in model.named_parameters():
        if name not in values:
            raise DataError(f"{path}: checkpoint is missing parameter {name!r}")
        if values[name].shape != p.data.shape:
            raise DimensionError(f"{path}: parameter {name!r} has shape "
                                 f"{values[name].shape}, expected {p.data.shape}")
        p.data = values[name]
    for name, b in model.named_buffers():
        if name in values:
            b[...] = values[name]
    return model
