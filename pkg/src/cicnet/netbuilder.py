"""Declarative architectures: blocks of three channel-local convolutions,
shape inference, parameter counting, presets and the text config format.

A block's ``pattern`` is a three-character string over ``{0, 1}``: ``1``
marks a layer that is locally connected along channels (window ``L``, one
filter per window, so ``C_out = C_in - L + 1``), ``0`` a fully connected
one (``L = C_in``).  Layer 0 of a block uses ``first_kernel`` spatially,
layer 1 uses ``inner x inner`` and layer 2 is always ``1x1``.
"""
import configparser
import hashlib
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, ShapeError
from .layers import ClcSpec, pool_output_size
from .network import BatchNorm, Clc, Dropout, MaxPool, Network, ReLU

LAYER_KINDS = ("clc", "bn", "relu", "maxpool", "dropout", "softmax-head")


@dataclass(frozen=True)
class PoolSpec:
    window: Tuple[int, int] = (3, 3)
    stride: Tuple[int, int] = (2, 2)
    pad: Tuple[int, int, int, int] = (0, 1, 0, 1)
    global_pool: bool = False


GLOBAL_POOL = PoolSpec((8, 8), (1, 1), (0, 0, 0, 0), global_pool=True)
HALVING_POOL = PoolSpec()


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    clc: Optional[ClcSpec] = None
    pool: Optional[PoolSpec] = None
    rate: Optional[float] = None
    name: str = ""

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        needs = {"clc": "clc", "maxpool": "pool", "dropout": "rate"}
        for kind, attr in needs.items():
            present = getattr(self, attr) is not None
            if present != (self.kind == kind):
                raise ConfigError(f"{self.kind} layer {'requires' if self.kind == kind else 'forbids'} {attr!r}")


@dataclass(frozen=True)
class BlockSpec:
    pattern: str
    widths: Tuple[int, int, int]
    first_kernel: Tuple[int, int] = (5, 5)
    inner: int = 1
    window_lens: Tuple[int, ...] = ()
    shared: bool = False

    def __post_init__(self):
        if len(self.pattern) != 3 or set(self.pattern) - {"0", "1"}:
            raise ConfigError(f"pattern must be three characters over 0/1, got {self.pattern!r}")
        if len(self.widths) != 3 or min(self.widths) < 1:
            raise ConfigError(f"widths must be three positive counts, got {self.widths}")
        if len(self.window_lens) != self.pattern.count("1"):
            raise ConfigError(f"pattern {self.pattern} needs {self.pattern.count('1')} window lengths, "
                              f"got {len(self.window_lens)}")

    def kernel(self, i: int) -> Tuple[int, int]:
        return (tuple(self.first_kernel), (self.inner, self.inner), (1, 1))[i]

    def window_len(self, i: int) -> Optional[int]:
        if self.pattern[i] != "1":
            return None
        return self.window_lens[self.pattern[:i].count("1")]


@dataclass(frozen=True)
class NetworkConfig:
    blocks: Tuple[BlockSpec, ...]
    pools: Tuple[PoolSpec, ...]
    dropouts: Tuple[float, ...]
    class_count: int = 10
    input_shape: Tuple[int, int, int] = (3, 32, 32)
    batch_norm: bool = True

    def __post_init__(self):
        if not (len(self.blocks) == len(self.pools) == len(self.dropouts)):
            raise ConfigError("blocks, pools and dropouts must have equal length")
        if not self.blocks:
            raise ConfigError("a network needs at least one block")
        if not isinstance(self.class_count, int) or self.class_count < 1:
            raise ConfigError(f"class_count must be a positive integer, got {self.class_count!r}")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError(f"input_shape must be three positive sizes, got {self.input_shape}")
        if any(not 0 <= r < 1 for r in self.dropouts):
            raise ConfigError("dropout rates must lie in [0, 1)")


def channel_out_count(c_in: int, window_len: int, filters_per_window: int = 1) -> int:
    """Output channels of a valid (unpadded) channel convolution."""
    if filters_per_window < 1 or window_len < 1:
        raise ShapeError("window length and filters per window must be >= 1")
    if window_len > c_in:
        raise ShapeError(f"window length {window_len} exceeds {c_in} input channels")
    return (c_in - window_len + 1) * filters_per_window


def param_count(spec: ClcSpec, c_in: int) -> Tuple[int, int]:
    """``(weights, biases)`` of a channel-local convolution on ``c_in`` channels."""
    windows = channel_out_count(c_in, spec.window_len)
    p_eff = 1 if spec.shared else windows
    kh, kw = spec.kernel
    return p_eff * spec.filters_per_window * kh * kw * spec.window_len, windows * spec.filters_per_window


def mlp_chain(widths: Sequence[int], pattern: str, window_len: int = 3,
              shared: bool = False) -> List[Tuple[ClcSpec, int]]:
    """Layers of a shallow MLP applied per pixel (1x1 spatial kernels).

    Dense positions connect every input; sparse ones slide a window of
    ``window_len`` and emit ``C_in - L + 1`` units.  Returns
    ``[(spec, c_in), ...]``; raises if a sparse layer's declared width
    disagrees with the window arithmetic.
    """
    if len(pattern) != len(widths) - 1 or set(pattern) - {"0", "1"}:
        raise ConfigError(f"pattern {pattern!r} does not describe {len(widths) - 1} layers")
    out = []
    for i, flag in enumerate(pattern):
        c_in, c_out = widths[i], widths[i + 1]
        if flag == "1":
            expect = channel_out_count(c_in, window_len)
            if expect != c_out:
                raise ConfigError(f"layer {i + 1}: window {window_len} on {c_in} inputs gives "
                                  f"{expect} units, not {c_out}")
            out.append((ClcSpec((1, 1), window_len, 1, shared), c_in))
        else:
            out.append((ClcSpec((1, 1), c_in, c_out), c_in))
    return out


# ---------------------------------------------------------------------------
# layer expansion and shape inference


def _block_clc(block: BlockSpec, i: int, c_in: int, where: str) -> ClcSpec:
    kh, kw = block.kernel(i)
    pad = (kh // 2, kw // 2)
    L = block.window_len(i)
    if L is None:
        return ClcSpec((kh, kw), c_in, block.widths[i], False, (1, 1), pad)
    if not L < c_in:
        raise ConfigError(f"{where}: sparse layer needs window length < input channels "
                          f"(got L={L}, C_in={c_in})")
    expect = c_in - L + 1
    if block.widths[i] != expect:
        raise ConfigError(f"{where}: declared width {block.widths[i]} but window {L} on "
                          f"{c_in} channels yields {expect}")
    return ClcSpec((kh, kw), L, 1, block.shared, (1, 1), pad)


def layer_specs(cfg: NetworkConfig) -> List[LayerSpec]:
    """Flatten a config into the ordered layer list (channel counts checked)."""
    specs = []
    c = cfg.input_shape[0]
    for b, block in enumerate(cfg.blocks):
        for i in range(3):
            where = f"block {b + 1} layer {i + 1} (K{3 * b + i})"
            clc = _block_clc(block, i, c, where)
            specs.append(LayerSpec("clc", clc=clc, name=f"K{3 * b + i}"))
            if cfg.batch_norm:
                specs.append(LayerSpec("bn", name=f"bn{3 * b + i}"))
            specs.append(LayerSpec("relu", name=f"relu{3 * b + i}"))
            c = clc.out_channels(c)
        specs.append(LayerSpec("maxpool", pool=cfg.pools[b], name=f"pool{b + 1}"))
        if cfg.dropouts[b] > 0:
            specs.append(LayerSpec("dropout", rate=cfg.dropouts[b], name=f"dropout{b + 1}"))
    specs.append(LayerSpec("softmax-head", name="head"))
    return specs


def infer_shapes(cfg: NetworkConfig, batch: int = 1) -> List[Tuple[int, int, int, int]]:
    """Output shape of every entry of :func:`layer_specs`."""
    try:
        specs = layer_specs(cfg)
    except ShapeError as exc:
        raise ConfigError(str(exc)) from exc
    shape = (batch,) + tuple(cfg.input_shape)
    shapes = []
    for spec in specs:
        b, c, h, w = shape
        try:
            if spec.kind == "clc":
                shape = spec.clc.output_shape(shape)
            elif spec.kind == "maxpool":
                p = spec.pool
                if p.global_pool:
                    shape = (b, c, 1, 1)
                else:
                    shape = (b, c) + pool_output_size(h, w, p.window, p.stride, p.pad)
            elif spec.kind == "softmax-head":
                if (c, h, w) != (cfg.class_count, 1, 1):
                    raise ShapeError(f"head expects ({cfg.class_count}, 1, 1), got {(c, h, w)}")
        except ShapeError as exc:
            raise ConfigError(f"{spec.name}: {exc}") from exc
        shapes.append(shape)
    return shapes


def build_network(cfg: NetworkConfig, seed: int = 0) -> Network:
    """Instantiate a :class:`Network` with He-initialized weights.

    Convolutions directly followed by batch norm carry no trainable bias:
    the normalization removes any per-channel shift, so that bias would
    have an identically zero gradient.
    """
    infer_shapes(cfg)
    specs = layer_specs(cfg)
    rng = np.random.default_rng(seed)
    layers = []
    c = cfg.input_shape[0]
    for idx, spec in enumerate(specs):
        if spec.kind == "clc":
            follows_bn = idx + 1 < len(specs) and specs[idx + 1].kind == "bn"
            layers.append(Clc(spec.clc, c, rng, bias=not follows_bn))
            c = spec.clc.out_channels(c)
        elif spec.kind == "bn":
            layers.append(BatchNorm(c))
        elif spec.kind == "relu":
            layers.append(ReLU())
        elif spec.kind == "maxpool":
            p = spec.pool
            layers.append(MaxPool(p.window, p.stride, p.pad, p.global_pool))
        elif spec.kind == "dropout":
            layers.append(Dropout(spec.rate, np.random.default_rng([seed, idx])))
    return Network(layers, cfg.class_count, cfg)


# ---------------------------------------------------------------------------
# presets


def _three_blocks(b1: BlockSpec, b2: BlockSpec, b3: BlockSpec, class_count: int) -> NetworkConfig:
    return NetworkConfig(
        blocks=(b1, b2, b3),
        pools=(HALVING_POOL, HALVING_POOL, GLOBAL_POOL),
        dropouts=(0.5, 0.5, 0.0),
        class_count=class_count,
    )


def _dense_block(first, widths) -> BlockSpec:
    return BlockSpec("000", tuple(widths), first_kernel=first)


# printed sparse widths per window length; 143 at L=48 cannot follow from 192
# inputs, so that column feeds the sparse layer 190 channels instead
TABLE2_SPARSE_OUT = {3: 190, 6: 187, 12: 181, 24: 169, 48: 143}


def _table2(L: int, classes: int) -> NetworkConfig:
    out = TABLE2_SPARSE_OUT[L]
    return _three_blocks(
        _dense_block((5, 5), (192, 192, 192)),
        BlockSpec("010", (out + L - 1, out, 192), (5, 5), 1, (L,)),
        _dense_block((3, 3), (192, 192, classes)),
        classes,
    )


def _table3(n: int, classes: int) -> NetworkConfig:
    return _three_blocks(
        _dense_block((5, 5), (192, 192, 192)),
        BlockSpec("010", (n, n - 2, 192), (5, 5), 1, (3,)),
        _dense_block((3, 3), (192, 192, classes)),
        classes,
    )


def _cic3d(classes: int) -> NetworkConfig:
    return _three_blocks(
        BlockSpec("010", (224, 222, 192), (5, 5), 5, (3,)),
        BlockSpec("010", (224, 222, 192), (5, 5), 5, (3,)),
        BlockSpec("010", (224, 222, classes), (3, 3), 5, (3,)),
        classes,
    )


def _nin_dense(classes: int) -> NetworkConfig:
    return _three_blocks(
        _dense_block((5, 5), (192, 192, 192)),
        _dense_block((5, 5), (192, 192, 192)),
        _dense_block((3, 3), (192, 192, classes)),
        classes,
    )


PRESETS = {
    **{f"table2-L{L}": (lambda c, L=L: _table2(L, c)) for L in TABLE2_SPARSE_OUT},
    **{f"table3-N{n}": (lambda c, n=n: _table3(n, c)) for n in (160, 192, 224, 256)},
    "cic1d-best": lambda c: _table3(224, c),
    "cic3d-default": _cic3d,
    "nin-dense": _nin_dense,
}


def preset_names() -> List[str]:
    return list(PRESETS)


def preset(name: str, class_count: int = 10) -> NetworkConfig:
    try:
        factory = PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; known: {', '.join(PRESETS)}") from None
    return factory(class_count)


def scale_widths(cfg: NetworkConfig, divisor: int) -> NetworkConfig:
    """Shrink every dense width by ``divisor`` (rounded, at least 1) and
    recompute sparse widths from the window arithmetic.  The class head is
    left untouched."""
    if divisor < 1:
        raise ConfigError("divisor must be >= 1")
    c = cfg.input_shape[0]
    blocks = []
    last = len(cfg.blocks) - 1
    for b, block in enumerate(cfg.blocks):
        widths = []
        for i in range(3):
            L = block.window_len(i)
            if L is not None:
                w = c - L + 1
            elif b == last and i == 2:
                w = cfg.class_count
            else:
                w = max(1, int(round(block.widths[i] / divisor)))
            widths.append(w)
            c = w
        blocks.append(replace(block, widths=tuple(widths)))
    return replace(cfg, blocks=tuple(blocks))


# ---------------------------------------------------------------------------
# text format


def _ints(text: str, sep: str = ",") -> Tuple[int, ...]:
    return tuple(int(t) for t in text.replace("x", sep).split(sep) if t.strip())


def config_to_text(cfg: NetworkConfig) -> str:
    lines = ["# cicnet network configuration", "[network]",
             f"class_count = {cfg.class_count}",
             f"input_shape = {','.join(map(str, cfg.input_shape))}",
             f"batch_norm = {str(cfg.batch_norm).lower()}"]
    for b, (block, pool, rate) in enumerate(zip(cfg.blocks, cfg.pools, cfg.dropouts)):
        lines += ["", f"[block{b + 1}]",
                  f"pattern = {block.pattern}",
                  f"first_kernel = {block.first_kernel[0]}x{block.first_kernel[1]}",
                  f"inner = {block.inner}",
                  f"widths = {','.join(map(str, block.widths))}",
                  f"window_len = {','.join(map(str, block.window_lens))}",
                  f"shared = {str(block.shared).lower()}"]
        if pool.global_pool:
            lines.append("pool = global")
        else:
            lines += [f"pool = {pool.window[0]}x{pool.window[1]}",
                      f"pool_stride = {pool.stride[0]},{pool.stride[1]}",
                      f"pool_pad = {','.join(map(str, pool.pad))}"]
        lines.append(f"dropout = {rate!r}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> NetworkConfig:
    parser = configparser.ConfigParser(comment_prefixes=("#",), inline_comment_prefixes=("#",))
    try:
        parser.read_string(text)
        net = parser["network"]
        blocks, pools, drops = [], [], []
        names = sorted((s for s in parser.sections() if s.startswith("block")),
                       key=lambda s: int(s[5:]))
        for name in names:
            sec = parser[name]
            blocks.append(BlockSpec(
                pattern=sec["pattern"].strip(),
                widths=_ints(sec["widths"]),
                first_kernel=_ints(sec.get("first_kernel", "1x1")),
                inner=sec.getint("inner", 1),
                window_lens=_ints(sec.get("window_len", "")),
                shared=sec.getboolean("shared", False),
            ))
            pool = sec.get("pool", "global").strip()
            if pool == "global":
                pools.append(GLOBAL_POOL)
            else:
                pools.append(PoolSpec(_ints(pool), _ints(sec.get("pool_stride", "1,1")),
                                      _ints(sec.get("pool_pad", "0,0,0,0"))))
            drops.append(sec.getfloat("dropout", 0.0))
        return NetworkConfig(
            blocks=tuple(blocks), pools=tuple(pools), dropouts=tuple(drops),
            class_count=net.getint("class_count"),
            input_shape=_ints(net.get("input_shape", "3,32,32")),
            batch_norm=net.getboolean("batch_norm", True),
        )
    except (KeyError, ValueError, configparser.Error) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"malformed config: {exc}") from exc


def load_config(path) -> NetworkConfig:
    with open(path, encoding="utf-8") as fh:
        return config_from_text(fh.read())


def config_hash(cfg: NetworkConfig) -> bytes:
    return hashlib.sha256(config_to_text(cfg).encode("utf-8")).digest()
