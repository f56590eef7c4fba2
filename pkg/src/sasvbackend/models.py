"""The eight backend ensemble architectures and their forward pass.

Presets (fusion mode, conv stack, attention, head):

==============  =======  ==================  ============  ==========  ==============
name            fusion   conv ch / kernels   attention     pool        dnn nodes
==============  =======  ==================  ============  ==========  ==============
Extend512_DNN   concat   -                   -             -           512,256,128,64
Extend1024_DNN  concat   -                   -             -           1024,512,256,128,64
CNN1D           stack1d  256,128,64 / 3,3,3  -             16          512,256,64
CNN1D_SE        stack1d  256,128,64 / 3,3,3  SE1D after 3  16          512,256,64
CNN1D_PA        stack1d  256,128,64 / 3,3,3  PA after 3    16          512,256,64
CNN2D           circ2d   32,64,128,256 /     -             16x16       256,128,64
                         5,3,3,3
CNN2D_SE        circ2d   as CNN2D            SE2D after 3  16x16       256,128,64
CNN2D_VSE       circ2d   as CNN2D            VSE after 3   16x16       256,128,64
==============  =======  ==================  ============  ==========  ==============

Conv blocks run conv -> batch norm -> LeakyReLU with stride 1 and
floor(k/2) padding; attention reduction ratio is 8 everywhere; a final
linear layer maps the last DNN width to 2 logits (class 1 = bonafide
target). Weights use uniform fan-in init with bound sqrt(6/fan_in), biases
start at zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import attention as att
from . import fusion
from . import tensor as T
from .data import atomic_write
from .tensor import RunningStats, Tensor

CHECKPOINT_FORMAT = "sasv-backend-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    name: str
    fusion_mode: str
    conv_channels: tuple[int, ...] = ()
    conv_kernels: tuple[int, ...] = ()
    pool_size: tuple[int, ...] = ()
    dnn_nodes: tuple[int, ...] = ()
    attention_kind: str | None = None
    attention_position: int | None = None
    reduction_ratio: int = 8
    num_classes: int = 2

    def __post_init__(self):
        if self.fusion_mode not in fusion.MODES:
            raise ValueError(f"unknown fusion mode {self.fusion_mode!r}")
        if len(self.conv_channels) != len(self.conv_kernels):
            raise ValueError(
                f"conv_channels and conv_kernels must have equal length, got "
                f"{len(self.conv_channels)} and {len(self.conv_kernels)}"
            )
        if self.attention_kind is not None:
            if self.attention_kind not in att.KINDS:
                raise ValueError(f"unknown attention kind {self.attention_kind!r}")
            pos = self.attention_position
            if pos is None or not 0 <= pos < len(self.conv_channels):
                raise ValueError(
                    f"attention position {pos} is not a valid conv layer index"
                )
        if not self.dnn_nodes:
            raise ValueError("at least one DNN layer is required")


def _cfg(**kw) -> ModelConfig:
    return ModelConfig(**kw)


# Attention sits after the third conv block (index 2) in every attention
# preset; the 1D pool target of 16 mirrors the 2D preset's 16x16.
PRESETS: dict[str, ModelConfig] = {
    "Extend512_DNN": _cfg(
        name="Extend512_DNN", fusion_mode=fusion.CONCAT, dnn_nodes=(512, 256, 128, 64)
    ),
    "Extend1024_DNN": _cfg(
        name="Extend1024_DNN",
        fusion_mode=fusion.CONCAT,
        dnn_nodes=(1024, 512, 256, 128, 64),
    ),
    "CNN1D": _cfg(
        name="CNN1D",
        fusion_mode=fusion.STACK1D,
        conv_channels=(256, 128, 64),
        conv_kernels=(3, 3, 3),
        pool_size=(16,),
        dnn_nodes=(512, 256, 64),
    ),
    "CNN1D_SE": _cfg(
        name="CNN1D_SE",
        fusion_mode=fusion.STACK1D,
        conv_channels=(256, 128, 64),
        conv_kernels=(3, 3, 3),
        pool_size=(16,),
        dnn_nodes=(512, 256, 64),
        attention_kind=att.SE1D,
        attention_position=2,
    ),
    "CNN1D_PA": _cfg(
        name="CNN1D_PA",
        fusion_mode=fusion.STACK1D,
        conv_channels=(256, 128, 64),
        conv_kernels=(3, 3, 3),
        pool_size=(16,),
        dnn_nodes=(512, 256, 64),
        attention_kind=att.PA,
        attention_position=2,
    ),
    "CNN2D": _cfg(
        name="CNN2D",
        fusion_mode=fusion.CIRC2D,
        conv_channels=(32, 64, 128, 256),
        conv_kernels=(5, 3, 3, 3),
        pool_size=(16, 16),
        dnn_nodes=(256, 128, 64),
    ),
    "CNN2D_SE": _cfg(
        name="CNN2D_SE",
        fusion_mode=fusion.CIRC2D,
        conv_channels=(32, 64, 128, 256),
        conv_kernels=(5, 3, 3, 3),
        pool_size=(16, 16),
        dnn_nodes=(256, 128, 64),
        attention_kind=att.SE2D,
        attention_position=2,
    ),
    "CNN2D_VSE": _cfg(
        name="CNN2D_VSE",
        fusion_mode=fusion.CIRC2D,
        conv_channels=(32, 64, 128, 256),
        conv_kernels=(5, 3, 3, 3),
        pool_size=(16, 16),
        dnn_nodes=(256, 128, 64),
        attention_kind=att.VSE,
        attention_position=2,
    ),
}


def preset(name: str) -> ModelConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(
            f"unknown preset {name!r}, expected one of {sorted(PRESETS)}"
        ) from None


class Model:
    """One built network: config, named parameters, BN buffers, mode flag."""

    def __init__(self, config: ModelConfig, dims: tuple[int, int, int], seed: int):
        self.config = config
        self.dims = tuple(int(x) for x in dims)
        self.seed = int(seed)
        self.training = False
        self.params: dict[str, Tensor] = {}
        self.bn_stats: dict[str, RunningStats] = {}
        self._attention: att.AttentionParams | None = None
        self._build(np.random.default_rng(seed))

    # -- construction ------------------------------------------------------

    def _add_param(self, name: str, tensor: Tensor) -> Tensor:
        self.params[name] = tensor
        return tensor

    def _uniform(self, rng, shape, fan_in) -> Tensor:
        bound = np.sqrt(6.0 / fan_in)
        return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

    def _build(self, rng: np.random.Generator) -> None:
        cfg = self.config
        d, b, q = self.dims
        if min(d, b, q) < 1:
            raise ValueError(f"embedding dims must be positive, got {self.dims}")
        common = max(d, b, q)

        if cfg.fusion_mode == fusion.CONCAT:
            flat = d + b + q
        else:
            in_ch = 3
            spatial = common  # stride 1, same padding keeps it
            for i, (ch, k) in enumerate(zip(cfg.conv_channels, cfg.conv_kernels)):
                if cfg.fusion_mode == fusion.CIRC2D:
                    wshape, fan = (ch, in_ch, k, k), in_ch * k * k
                else:
                    wshape, fan = (ch, in_ch, k), in_ch * k
                self._add_param(f"conv{i}.w", self._uniform(rng, wshape, fan))
                self._add_param(f"conv{i}.b", Tensor(np.zeros(ch), requires_grad=True))
                self._add_param(f"bn{i}.gamma", Tensor(np.ones(ch), requires_grad=True))
                self._add_param(f"bn{i}.beta", Tensor(np.zeros(ch), requires_grad=True))
                self.bn_stats[f"bn{i}"] = RunningStats(ch)
                if cfg.attention_position == i and cfg.attention_kind is not None:
                    self._attention = att.AttentionParams.init(
                        cfg.attention_kind,
                        rng,
                        channels=ch,
                        features=spatial,
                        reduction=cfg.reduction_ratio,
                    )
                    for wname, wt in self._attention.named_weights():
                        self._add_param(f"att.{wname}", wt)
                in_ch = ch
            pool = cfg.pool_size
            if cfg.fusion_mode == fusion.CIRC2D:
                if pool[0] > spatial or pool[1] > spatial:
                    raise ValueError(
                        f"pool size {pool} exceeds post-conv spatial size {spatial}x{spatial}"
                    )
                flat = in_ch * pool[0] * pool[1]
            else:
                if pool[0] > spatial:
                    raise ValueError(
                        f"pool size {pool[0]} exceeds post-conv length {spatial}"
                    )
                flat = in_ch * pool[0]

        width = flat
        for i, nodes in enumerate(cfg.dnn_nodes):
            self._add_param(f"fc{i}.w", self._uniform(rng, (width, nodes), width))
            self._add_param(f"fc{i}.b", Tensor(np.zeros(nodes), requires_grad=True))
            width = nodes
        self._add_param("head.w", self._uniform(rng, (width, cfg.num_classes), width))
        self._add_param("head.b", Tensor(np.zeros(cfg.num_classes), requires_grad=True))

    # -- mode & parameter access -------------------------------------------

    def train(self) -> "Model":
        self.training = True
        return self

    def eval(self) -> "Model":
        self.training = False
        return self

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Copies of all learnable arrays and BN buffers, for snapshots."""
        out = {name: p.data.copy() for name, p in self.params.items()}
        for name, st in self.bn_stats.items():
            out[f"{name}.running_mean"] = st.mean.copy()
            out[f"{name}.running_var"] = st.var.copy()
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            p.data = arrays[name].astype(np.float64).reshape(p.data.shape).copy()
        for name, st in self.bn_stats.items():
            st.mean = arrays[f"{name}.running_mean"].astype(np.float64).copy()
            st.var = arrays[f"{name}.running_var"].astype(np.float64).copy()

    # -- forward -----------------------------------------------------------

    def forward(self, batch: np.ndarray, mode: str) -> Tensor:
        """Logits (Bx2) for a fused input batch; mode must match the config."""
        cfg = self.config
        if mode != cfg.fusion_mode:
            raise ValueError(
                f"model {cfg.name} expects fusion mode {cfg.fusion_mode!r}, got {mode!r}"
            )
        x = Tensor(np.asarray(batch, dtype=np.float64))
        p = self.params
        if cfg.conv_channels:
            conv = T.conv2d if cfg.fusion_mode == fusion.CIRC2D else T.conv1d
            for i, k in enumerate(cfg.conv_kernels):
                x = conv(x, p[f"conv{i}.w"], p[f"conv{i}.b"], stride=1, padding=k // 2)
                x = T.batch_norm(
                    x, p[f"bn{i}.gamma"], p[f"bn{i}.beta"], self.bn_stats[f"bn{i}"],
                    training=self.training,
                )
                x = T.leaky_relu(x)
                if cfg.attention_position == i and self._attention is not None:
                    x = att.apply_attention(x, self._attention)
            if cfg.fusion_mode == fusion.CIRC2D:
                x = T.adaptive_avg_pool2d(x, (cfg.pool_size[0], cfg.pool_size[1]))
            else:
                x = T.adaptive_avg_pool1d(x, cfg.pool_size[0])
            x = T.reshape(x, (x.shape[0], int(np.prod(x.shape[1:]))))
        for i in range(len(cfg.dnn_nodes)):
            x = T.leaky_relu(T.linear(x, p[f"fc{i}.w"], p[f"fc{i}.b"]))
        return T.linear(x, p["head.w"], p["head.b"])

    def score_batch(self, batch: np.ndarray, mode: str) -> np.ndarray:
        """Probability of the bonafide-target class per trial (eval only)."""
        if self.training:
            raise RuntimeError("scoring requires eval mode")
        logits = self.forward(batch, mode)
        return softmax_scores(logits.data)


def softmax_scores(logits: np.ndarray) -> np.ndarray:
    """Softmax probability of class 1 from Bx2 logits (max-shifted)."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e[:, 1] / e.sum(axis=1)


def build(config: ModelConfig | str, dims: tuple[int, int, int], seed: int = 0) -> Model:
    """Construct a model from a preset name or an explicit config."""
    if isinstance(config, str):
        config = preset(config)
    return Model(config, dims, seed)


# -- checkpoint io -----------------------------------------------------------
#
# One JSON header line (config echo, dims, seed, array manifest), then the
# raw little-endian float64 bytes of every array in manifest order. Writing
# is bit-deterministic for a given model state.


def save_checkpoint(model: Model, path: str) -> None:
    arrays = model.state_arrays()
    names = list(arrays.keys())
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "dims": list(model.dims),
        "seed": model.seed,
        "arrays": [{"name": n, "shape": list(arrays[n].shape)} for n in names],
    }
    with atomic_write(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode())
        fh.write(b"\n")
        for n in names:
            fh.write(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes())


def load_checkpoint(path: str) -> Model:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        blob = fh.read()
    header = json.loads(header_line.decode())
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
    cfg_dict = dict(header["config"])
    for key in ("conv_channels", "conv_kernels", "pool_size", "dnn_nodes"):
        cfg_dict[key] = tuple(cfg_dict[key])
    config = ModelConfig(**cfg_dict)
    model = Model(config, tuple(header["dims"]), header["seed"])
    counts = [int(np.prod(e["shape"])) if e["shape"] else 1 for e in header["arrays"]]
    if len(blob) != 8 * sum(counts):
        raise ValueError(f"{path}: checkpoint payload size mismatch")
    arrays = {}
    offset = 0
    for entry, count in zip(header["arrays"], counts):
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
        arrays[entry["name"]] = arr.reshape(tuple(entry["shape"]))
        offset += count * 8
    model.load_state_arrays(arrays)
    return model
