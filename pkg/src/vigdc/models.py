"""Model assembly: the concatenate-skip damage classification network (VDCNet)
and a small addition-skip reference network, built from tensor-core primitives.

Both models expose named feature-map taps (``last_conv`` at minimum) for the
class-activation-mapping methods, a flat parameter registry, and a
``describe()`` dump used by the structural tests.
"""

from __future__ import annotations

import io

import numpy as np

from .tensor import (
    BatchNormState,
    ShapeError,
    Tensor,
    add,
    batchnorm2d,
    concat_channels,
    conv2d,
    dense,
    global_pool,
    maxpool2d,
    relu,
    sigmoid,
)


def _he_normal(rng, shape, fan_in, dtype=np.float32):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class ConvLayer:
    kind = "conv"

    def __init__(self, name, in_ch, out_ch, kernel, rng):
        self.name = name
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.kernel_size = kernel
        fan_in = in_ch * kernel * kernel
        self.weight = Tensor(_he_normal(rng, (out_ch, in_ch, kernel, kernel), fan_in), requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=np.float32), requires_grad=True)

    def __call__(self, x, mode):
        return conv2d(x, self.weight, self.bias, stride=1, padding="same")

    def params(self):
        return {f"{self.name}.weight": self.weight, f"{self.name}.bias": self.bias}

    def buffers(self):
        return {}


class BNLayer:
    kind = "bn"

    def __init__(self, name, channels, momentum=0.99, epsilon=1e-3):
        self.name = name
        self.state = BatchNormState(channels, momentum=momentum, epsilon=epsilon)

    def __call__(self, x, mode):
        return batchnorm2d(x, self.state, mode=mode)

    def params(self):
        return {f"{self.name}.gamma": self.state.gamma, f"{self.name}.beta": self.state.beta}

    def buffers(self):
        return {
            f"{self.name}.moving_mean": self.state,
            f"{self.name}.moving_variance": self.state,
        }


class ConvBlock:
    """BN-ReLU-conv1x1, BN-ReLU-conv3x3, BN-ReLU-conv1x1, then channel-concat
    of the block input with the block output, then optional 2x2 max pooling.

    Output channel count = in_channels + widths[2].
    """

    def __init__(self, name, in_ch, widths, with_pool, rng, bn_momentum=0.99, bn_epsilon=1e-3):
        w1, w2, w3 = widths
        if min(w1, w2, w3) <= 0:
            raise ValueError("block widths must be positive")
        self.name = name
        self.in_ch = in_ch
        self.widths = (w1, w2, w3)
        self.with_pool = with_pool
        self.out_ch = in_ch + w3
        bn = lambda n, c: BNLayer(f"{name}.{n}", c, bn_momentum, bn_epsilon)
        cv = lambda n, ci, co, k: ConvLayer(f"{name}.{n}", ci, co, k, rng)
        self.bn1, self.conv1 = bn("bn1", in_ch), cv("conv1", in_ch, w1, 1)
        self.bn2, self.conv2 = bn("bn2", w1), cv("conv2", w1, w2, 3)
        self.bn3, self.conv3 = bn("bn3", w2), cv("conv3", w2, w3, 1)

    def __call__(self, x, mode):
        h = self.conv1(relu(self.bn1(x, mode)), mode)
        h = self.conv2(relu(self.bn2(h, mode)), mode)
        h = self.conv3(relu(self.bn3(h, mode)), mode)
        out = concat_channels(x, h)
        if self.with_pool:
            out = maxpool2d(out, 2)
        return out

    def sublayers(self):
        return [self.bn1, self.conv1, self.bn2, self.conv2, self.bn3, self.conv3]


class ResidualBlock:
    """Pre-activation addition-skip block; 1x1 projection on width change."""

    def __init__(self, name, in_ch, out_ch, rng, bn_momentum=0.99, bn_epsilon=1e-3):
        self.name = name
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.bn1 = BNLayer(f"{name}.bn1", in_ch, bn_momentum, bn_epsilon)
        self.conv1 = ConvLayer(f"{name}.conv1", in_ch, out_ch, 3, rng)
        self.bn2 = BNLayer(f"{name}.bn2", out_ch, bn_momentum, bn_epsilon)
        self.conv2 = ConvLayer(f"{name}.conv2", out_ch, out_ch, 3, rng)
        self.proj = None
        if in_ch != out_ch:
            self.proj = ConvLayer(f"{name}.proj", in_ch, out_ch, 1, rng)

    def __call__(self, x, mode):
        h = self.conv1(relu(self.bn1(x, mode)), mode)
        h = self.conv2(relu(self.bn2(h, mode)), mode)
        skip = self.proj(x, mode) if self.proj is not None else x
        return add(skip, h)

    def sublayers(self):
        layers = [self.bn1, self.conv1, self.bn2, self.conv2]
        if self.proj is not None:
            layers.append(self.proj)
        return layers


class ModelGraph:
    """Layered graph with a parameter registry and named feature-map taps.

    ``forward`` returns the pre-sigmoid logit tensor; ``forward_with_taps``
    returns probabilities plus the tap map. Mutable state (weights, BN
    moving statistics, tap buffers) lives on the graph, so one graph
    instance should be driven by one thread at a time.
    """

    def __init__(self, kind, input_size, head_pool_mode="avg"):
        if head_pool_mode not in ("avg", "max"):
            raise ValueError("head_pool_mode must be 'avg' or 'max'")
        self.kind = kind
        self.input_size = input_size
        self.head_pool_mode = head_pool_mode
        self.stages = []          # (label, callable with sublayers())
        self.head_dense_w = None
        self.head_dense_b = None
        self.taps = {}
        self.tap_layers = {}      # tap name -> stage label after which to record

    # -- registry ---------------------------------------------------------
    def _all_layers(self):
        for _, stage in self.stages:
            if hasattr(stage, "sublayers"):
                yield from stage.sublayers()
            else:
                yield stage

    def parameters(self):
        reg = {}
        for layer in self._all_layers():
            if hasattr(layer, "params"):
                reg.update(layer.params())
        reg["head.dense.weight"] = self.head_dense_w
        reg["head.dense.bias"] = self.head_dense_b
        return reg

    def bn_states(self):
        states = {}
        for layer in self._all_layers():
            if isinstance(layer, BNLayer):
                states[layer.name] = layer.state
        return states

    @property
    def conv_count(self):
        return sum(1 for l in self._all_layers() if isinstance(l, ConvLayer))

    @property
    def maxpool_count(self):
        n = 0
        for _, stage in self.stages:
            if isinstance(stage, ConvBlock) and stage.with_pool:
                n += 1
            elif getattr(stage, "kind", None) == "maxpool":
                n += 1
        return n

    # -- execution --------------------------------------------------------
    def forward(self, batch: Tensor, mode: str = "infer", keep_tap_grads: bool = False):
        n, c, h, w = batch.data.shape
        if (h, w) != (self.input_size, self.input_size):
            raise ShapeError(f"input spatial size ({h},{w}) != build size {self.input_size}")
        self.taps = {}
        x = batch
        for label, stage in self.stages:
            x = stage(x, mode)
            for tap_name, tap_label in self.tap_layers.items():
                if tap_label == label:
                    if keep_tap_grads:
                        x.requires_grad = True
                    self.taps[tap_name] = x
        pooled = global_pool(x, self.head_pool_mode)
        return dense(pooled, self.head_dense_w, self.head_dense_b)

    def forward_with_taps(self, batch: Tensor, mode: str = "infer"):
        logits = self.forward(batch, mode)
        return Tensor(sigmoid(logits.data)), dict(self.taps)

    def predict(self, batch: Tensor):
        """Infer-mode class-1 probabilities as a flat float array."""
        logits = self.forward(batch, mode="infer")
        return sigmoid(logits.data)[:, 0]

    # -- introspection ----------------------------------------------------
    def describe(self):
        """Text dump: one line per layer with output shape and param count."""
        out = io.StringIO()
        size = self.input_size
        ch = 3
        n_params = count_params(self)
        print(f"model {self.kind}: input {self.input_size}x{self.input_size}x3, "
              f"head {self.head_pool_mode}-pool -> dense(1) -> sigmoid", file=out)
        for label, stage in self.stages:
            if isinstance(stage, ConvBlock):
                size_in = size
                if stage.with_pool:
                    size //= 2
                ch = stage.out_ch
                p = sum(t.data.size for l in stage.sublayers() for t in l.params().values())
                pool = " + maxpool2x2" if stage.with_pool else ""
                print(f"  {label}: concat-skip block {stage.in_ch}->({'/'.join(map(str, stage.widths))})"
                      f"{pool} | out {ch}x{size}x{size} | params {p}", file=out)
                for l in stage.sublayers():
                    if isinstance(l, ConvLayer):
                        print(f"    conv {l.kernel_size}x{l.kernel_size} {l.in_ch}->{l.out_ch} "
                              f"| out {l.out_ch}x{size_in}x{size_in}", file=out)
            elif isinstance(stage, ResidualBlock):
                ch = stage.out_ch
                p = sum(t.data.size for l in stage.sublayers() for t in l.params().values())
                print(f"  {label}: add-skip block {stage.in_ch}->{stage.out_ch} "
                      f"| out {ch}x{size}x{size} | params {p}", file=out)
            elif isinstance(stage, ConvLayer):
                ch = stage.out_ch
                p = stage.weight.data.size + stage.bias.data.size
                print(f"  {label}: conv {stage.kernel_size}x{stage.kernel_size} {stage.in_ch}->{stage.out_ch} "
                      f"| out {ch}x{size}x{size} | params {p}", file=out)
            elif isinstance(stage, BNLayer):
                print(f"  {label}: batchnorm({stage.state.channels}) | out {ch}x{size}x{size} "
                      f"| params {2 * stage.state.channels}", file=out)
            elif getattr(stage, "kind", None) == "maxpool":
                size //= 2
                print(f"  {label}: maxpool 2x2 | out {ch}x{size}x{size}", file=out)
        tap = self.tap_spatial_size()
        print(f"  head: global-{self.head_pool_mode}-pool -> dense({ch}->1) -> sigmoid", file=out)
        print(f"conv layers: {self.conv_count} | maxpool layers: {self.maxpool_count} "
              f"| tap last_conv: {ch}x{tap}x{tap} | trainable params: {n_params}", file=out)
        return out.getvalue()

    def tap_spatial_size(self):
        pools = self.maxpool_count
        return self.input_size // (2 ** pools)

    def tap_channels(self):
        last_conv = [l for l in self._all_layers() if isinstance(l, ConvLayer)][-1]
        return last_conv.out_ch


class _PoolStage:
    kind = "maxpool"

    def __call__(self, x, mode):
        return maxpool2d(x, 2)


def count_params(graph: ModelGraph) -> int:
    """Trainable parameter count (gamma/beta included, moving stats excluded)."""
    return sum(t.data.size for t in graph.parameters().values())


def build_conv_block(name, in_channels, widths, with_pool, rng=None, bn_momentum=0.99, bn_epsilon=1e-3):
    if rng is None:
        rng = np.random.default_rng(0)
    return ConvBlock(name, in_channels, tuple(widths), with_pool, rng, bn_momentum, bn_epsilon)


# Width schedule tuned once via count_params so the default (multiplier 1)
# lands within 10% of the 25.9M-parameter target.
VDCNET_BASE_WIDTHS = (64, 128, 256, 512, 704, 704)
VDCNET_BASE_STEM = 64
VDCNET_BASE_FINAL = 4096


def _scaled(value, multiplier, floor=4):
    return max(floor, int(round(value * multiplier)))


def build_vdcnet(width_multiplier=1.0, input_size=352, head_pool_mode="avg",
                 seed=0, bn_momentum=0.99, bn_epsilon=1e-3, final_channels=None,
                 final_floor=4):
    """Concatenate-skip classifier: stem BN + 3x3 conv, six conv blocks
    (four with pooling, two without), final 1x1 conv (the ``last_conv`` tap),
    global pool, dense(1). 20 convolution layers, 4 max-pool layers.
    """
    if input_size % 16 != 0 or input_size <= 0:
        raise ValueError(f"input size must be a positive multiple of 16, got {input_size}")
    rng = np.random.default_rng(seed)
    g = ModelGraph("vdcnet", input_size, head_pool_mode)
    stem_ch = _scaled(VDCNET_BASE_STEM, width_multiplier)
    g.stages.append(("stem_bn", BNLayer("stem_bn", 3, bn_momentum, bn_epsilon)))
    g.stages.append(("stem_conv", ConvLayer("stem_conv", 3, stem_ch, 3, rng)))
    ch = stem_ch
    for i, base_w3 in enumerate(VDCNET_BASE_WIDTHS, start=1):
        w3 = _scaled(base_w3, width_multiplier)
        block = ConvBlock(f"block{i}", ch, (w3, w3, w3), with_pool=(i <= 4), rng=rng,
                          bn_momentum=bn_momentum, bn_epsilon=bn_epsilon)
        g.stages.append((f"block{i}", block))
        ch = block.out_ch
    if final_channels is None:
        final_channels = _scaled(VDCNET_BASE_FINAL, width_multiplier, floor=final_floor)
    g.stages.append(("final_bn", BNLayer("final_bn", ch, bn_momentum, bn_epsilon)))
    g.stages.append(("final_conv", ConvLayer("final_conv", ch, final_channels, 1, rng)))
    g.tap_layers["last_conv"] = "final_conv"
    g.head_dense_w = Tensor(_he_normal(rng, (final_channels, 1), final_channels), requires_grad=True)
    g.head_dense_b = Tensor(np.zeros(1, dtype=np.float32), requires_grad=True)
    return g


REFNET_BASE_WIDTHS = (32, 64, 128, 256, 512)
REFNET_BASE_FINAL = 512


def build_reference_net(width_multiplier=1.0, input_size=352, head_pool_mode="avg",
                        seed=0, bn_momentum=0.99, bn_epsilon=1e-3):
    """Small addition-skip comparison net with 5 downsampling steps, so its
    ``last_conv`` tap sits at input/32 (4x fewer tap pixels than the
    concatenate-skip model at equal input size).
    """
    if input_size % 32 != 0 or input_size <= 0:
        raise ValueError(f"input size must be a positive multiple of 32, got {input_size}")
    rng = np.random.default_rng(seed)
    g = ModelGraph("refnet", input_size, head_pool_mode)
    stem_ch = _scaled(REFNET_BASE_WIDTHS[0], width_multiplier)
    g.stages.append(("stem_conv", ConvLayer("stem_conv", 3, stem_ch, 3, rng)))
    ch = stem_ch
    for i, base_w in enumerate(REFNET_BASE_WIDTHS, start=1):
        w = _scaled(base_w, width_multiplier)
        block = ResidualBlock(f"block{i}", ch, w, rng, bn_momentum, bn_epsilon)
        g.stages.append((f"block{i}", block))
        g.stages.append((f"pool{i}", _PoolStage()))
        ch = w
    final_ch = _scaled(REFNET_BASE_FINAL, width_multiplier)
    g.stages.append(("final_bn", BNLayer("final_bn", ch, bn_momentum, bn_epsilon)))
    g.stages.append(("final_conv", ConvLayer("final_conv", ch, final_ch, 1, rng)))
    g.tap_layers["last_conv"] = "final_conv"
    g.head_dense_w = Tensor(_he_normal(rng, (final_ch, 1), final_ch), requires_grad=True)
    g.head_dense_b = Tensor(np.zeros(1, dtype=np.float32), requires_grad=True)
    return g
