"""The top-down encoder-decoder contour network.

Encoder: VGG-16 convolution trunk up to pool5, every conv followed by BN and
ReLU. Decoder: five refined modules, each upsampling the current decoder map
to the size of the matching encoder feature (the last conv output before
that stage's pool), concatenating ``[upsampled, skip]`` along channels and
applying trainable 3x3 conv/BN/ReLU blocks plus a trailing dropout. In
training mode five side heads (1x1 conv, bilinear resize to the input size,
sigmoid) supervise the refined-module outputs; a 1x1 conv + sigmoid on the
stage-1 output gives the final prediction.
"""
from __future__ import annotations

from collections import OrderedDict
from typing import Sequence

import numpy as np

from . import layers as L
from .checkpoint import SchemaError, read_records, write_records
from .tensor import Precision, Tensor, concat_channels, split_channels

VGG16_WIDTHS = (64, 128, 256, 512, 512)
STAGE_DEPTHS = (2, 2, 3, 3, 3)
MIN_INPUT_SIZE = 32
VGG16_ENCODER_PARAMS = 14_714_688

_INIT_STREAM = 1


class ConvBlock:
    """conv(3x3) -> BN -> ReLU."""

    def __init__(self, c_in: int, c_out: int, dtype):
        self.conv = L.Conv2d(c_in, c_out, 3, dtype=dtype)
        self.bn = L.BatchNorm2d(c_out, dtype=dtype)
        self.relu = L.ReLU()

    def layers(self):
        return (self.conv, self.bn, self.relu)

    def forward(self, x):
        return self.relu.forward(self.bn.forward(self.conv.forward(x)))

    def backward(self, g, need_input_grad=True):
        return self.conv.backward(self.bn.backward(self.relu.backward(g)), need_input_grad)


class RefinedModule:
    """Upsample decoder map to the skip size, concat with the skip, conv blocks, dropout."""

    def __init__(self, stage: int, c_dec: int, c_skip: int, c_out: int, depth: int, dropout_rate: float, seed: int, dtype):
        self.stage = stage
        self.c_dec = c_dec
        self.up = L.Upsample()
        widths = [c_dec + c_skip] + [c_out] * depth
        # Table order: deconvS_depth ... deconvS_1
        self.blocks = OrderedDict(
            (f"dec{stage}_{depth - i}", ConvBlock(widths[i], widths[i + 1], dtype)) for i in range(depth)
        )
        self.dropout = L.Dropout(dropout_rate, layer_id=stage, seed=seed)

    def layers(self):
        yield self.up
        for block in self.blocks.values():
            yield from block.layers()
        yield self.dropout

    def forward(self, decoder_feat, encoder_skip):
        if decoder_feat.shape[0] != encoder_skip.shape[0]:
            raise ValueError(
                f"batch mismatch between decoder {decoder_feat.shape} and skip {encoder_skip.shape}"
            )
        h = concat_channels(self.up.forward(decoder_feat, encoder_skip.shape[2:]), encoder_skip)
        for block in self.blocks.values():
            h = block.forward(h)
        return self.dropout.forward(h)

    def backward(self, g):
        g = self.dropout.backward(g)
        for block in reversed(self.blocks.values()):
            g = block.backward(g)
        g_up, g_skip = split_channels(g, self.c_dec)
        return self.up.backward(g_up), g_skip


class SideHead:
    """1x1 conv to one channel, fixed bilinear resize to the input size, sigmoid."""

    def __init__(self, c_in: int, dtype):
        self.reduce = L.Conv2d(c_in, 1, 1, dtype=dtype)
        self.up = L.Upsample()
        self.sigmoid = L.Sigmoid()

    def layers(self):
        return (self.reduce, self.up, self.sigmoid)

    def forward(self, feat, input_hw):
        """Returns ``(probabilities, logits)`` at ``input_hw``."""
        z = self.up.forward(self.reduce.forward(feat), input_hw)
        return self.sigmoid.forward(z), z

    def backward_logits(self, g_logits):
        return self.reduce.backward(self.up.backward(g_logits))


class TDCEDN:
    """The full graph with an ordered parameter registry.

    ``widths`` are the five encoder stage widths; the VGG-16 default gives
    the full-size network, smaller tuples give the same topology for tests.
    """

    def __init__(
        self,
        widths: Sequence[int] = VGG16_WIDTHS,
        input_channels: int = 3,
        dropout_rate: float = L.DROPOUT_RATE,
        seed: int = 0,
        precision: Precision | str = Precision.F32,
        init: bool = True,
    ):
        widths = tuple(int(w) for w in widths)
        if len(widths) != 5 or min(widths) < 1:
            raise ValueError(f"need five positive stage widths, got {widths}")
        self.widths = widths
        self.input_channels = int(input_channels)
        self.dropout_rate = float(dropout_rate)
        self.seed = int(seed)
        self.precision = Precision.coerce(precision)
        dtype = self.precision.dtype

        self.encoder: list[OrderedDict[str, ConvBlock]] = []
        c = self.input_channels
        for s, (width, depth) in enumerate(zip(widths, STAGE_DEPTHS), start=1):
            stage = OrderedDict()
            for i in range(1, depth + 1):
                stage[f"enc{s}_{i}"] = ConvBlock(c, width, dtype)
                c = width
            self.encoder.append(stage)
        self.pools = [L.MaxPool2x2() for _ in range(5)]

        # decoder[s - 1] is the refined module for stage s
        self.decoder: list[RefinedModule] = []
        for s in range(1, 6):
            c_dec = widths[min(s, 4)]
            self.decoder.append(
                RefinedModule(s, c_dec, widths[s - 1], widths[s - 1], STAGE_DEPTHS[s - 1], self.dropout_rate, self.seed, dtype)
            )
        self.side_heads = [SideHead(widths[s - 1], dtype) for s in range(1, 6)]
        self.pred_conv = L.Conv2d(widths[0], 1, 1, dtype=dtype)
        self.pred_sigmoid = L.Sigmoid()

        self.params: OrderedDict[str, Tensor] = OrderedDict()
        self.buffers: OrderedDict[str, np.ndarray] = OrderedDict()
        self._convs: list[L.Conv2d] = []
        for prefix, layer in self._named_layers():
            for name, t in layer.params().items():
                self.params[f"{prefix}.{name}"] = t
            for name, b in layer.buffers().items():
                self.buffers[f"{prefix}.{name}"] = b
            if isinstance(layer, L.Conv2d):
                self._convs.append(layer)
        self.training = True
        if init:
            self.reset_parameters()

    # ------------------------------------------------------------- structure

    def _named_layers(self):
        for stage in self.encoder:
            for name, block in stage.items():
                yield f"{name}.conv", block.conv
                yield f"{name}.bn", block.bn
        for module in reversed(self.decoder):
            for name, block in module.blocks.items():
                yield f"{name}.conv", block.conv
                yield f"{name}.bn", block.bn
        for s, head in enumerate(self.side_heads, start=1):
            yield f"side{s}", head.reduce
        yield "pred", self.pred_conv

    def _all_layers(self):
        for stage in self.encoder:
            for block in stage.values():
                yield from block.layers()
        yield from self.pools
        for module in self.decoder:
            yield from module.layers()
        for head in self.side_heads:
            yield from head.layers()
        yield self.pred_conv
        yield self.pred_sigmoid

    def reset_parameters(self) -> None:
        """He fan-in init for convs, identity BN; deterministic in ``seed``."""
        rng = np.random.default_rng([self.seed, _INIT_STREAM])
        for conv in self._convs:
            conv.init_he(rng)
        for name, t in self.params.items():
            if name.endswith(".gamma"):
                t.data[...] = 1
            elif name.endswith(".beta"):
                t.data[...] = 0
        for name, b in self.buffers.items():
            b[...] = 1 if name.endswith("running_var") else 0

    def train(self) -> "TDCEDN":
        self.training = True
        for layer in self._all_layers():
            layer.training = True
        return self

    def eval(self) -> "TDCEDN":
        self.training = False
        for layer in self._all_layers():
            layer.training = False
        return self

    def set_iteration(self, iteration: int) -> None:
        """Select the dropout masks used by the next training forward pass."""
        for module in self.decoder:
            module.dropout.iteration = int(iteration)

    def set_dropout_seed(self, seed: int) -> None:
        for module in self.decoder:
            module.dropout.seed = int(seed)

    def encoder_param_count(self) -> int:
        """Trainable conv weights and biases of the encoder trunk."""
        return sum(
            t.data.size for name, t in self.params.items() if name.startswith("enc") and ".conv." in name
        )

    def param_count(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def fixed_kernels(self) -> dict[str, np.ndarray]:
        """Bilinear interpolation matrices used by the last training forward pass."""
        out = {}
        for s, (module, head) in enumerate(zip(self.decoder, self.side_heads), start=1):
            for tag, up in (("up", module.up), ("side_up", head.up)):
                shapes = getattr(up, "_shapes", None)
                if shapes is None:
                    continue
                (h, w), (th, tw) = shapes
                dt = self.precision.dtype.name
                out[f"{tag}{s}.rows"] = L.interpolation_matrix(h, th, dt)
                out[f"{tag}{s}.cols"] = L.interpolation_matrix(w, tw, dt)
        return out

    # ------------------------------------------------------------ execution

    def _check_input(self, x) -> np.ndarray:
        x = np.asarray(x)
        if x.ndim != 4 or x.shape[1] != self.input_channels:
            raise ValueError(f"expected input (n, {self.input_channels}, H, W), got {x.shape}")
        if x.shape[2] < MIN_INPUT_SIZE or x.shape[3] < MIN_INPUT_SIZE:
            raise ValueError(f"input spatial size {x.shape[2:]} below minimum {MIN_INPUT_SIZE}x{MIN_INPUT_SIZE}")
        return np.ascontiguousarray(x, dtype=self.precision.dtype)

    def forward(self, x) -> dict:
        """Run the graph.

        Returns ``{"pred": (n,1,H,W)}`` in inference mode; training mode adds
        ``"sides"`` (five maps, index 0 = stage 1) and the matching logits.
        """
        x = self._check_input(x)
        hw = x.shape[2:]
        h = x
        skips = []
        for stage, pool in zip(self.encoder, self.pools):
            for block in stage.values():
                h = block.forward(h)
            skips.append(h)
            h = pool.forward(h)

        sides = [None] * 5
        side_logits = [None] * 5
        for s in range(5, 0, -1):
            h = self.decoder[s - 1].forward(h, skips[s - 1])
            if self.training:
                sides[s - 1], side_logits[s - 1] = self.side_heads[s - 1].forward(h, hw)
        logits = self.pred_conv.forward(h)
        pred = self.pred_sigmoid.forward(logits)
        if not self.training:
            return {"pred": pred}
        return {"pred": pred, "sides": sides, "pred_logits": logits, "side_logits": side_logits}

    def backward(self, grad_pred, grad_sides=None, wrt_logits: bool = True) -> None:
        """Backpropagate and store gradients in every registry tensor's ``grad``.

        Gradients are taken w.r.t. the pre-sigmoid logits when ``wrt_logits``,
        otherwise w.r.t. the probabilities.
        """
        if not self.training:
            raise RuntimeError("backward requires training mode")
        if not wrt_logits:
            grad_pred = self.pred_sigmoid.backward(grad_pred)
        g = self.pred_conv.backward(grad_pred)
        skip_grads = [None] * 5
        for s in range(1, 6):
            head = self.side_heads[s - 1]
            if grad_sides is not None and grad_sides[s - 1] is not None:
                gs = grad_sides[s - 1]
                if not wrt_logits:
                    gs = head.sigmoid.backward(gs)
                g = g + head.backward_logits(gs)
            else:
                head.reduce.weight.grad = np.zeros_like(head.reduce.weight.data)
                head.reduce.bias.grad = np.zeros_like(head.reduce.bias.data)
            g, skip_grads[s - 1] = self.decoder[s - 1].backward(g)
        for s in range(5, 0, -1):
            g = self.pools[s - 1].backward(g) + skip_grads[s - 1]
            blocks = list(self.encoder[s - 1].values())
            for i, block in enumerate(reversed(blocks)):
                first = s == 1 and i == len(blocks) - 1
                g = block.backward(g, need_input_grad=not first)

    def predict(self, x) -> np.ndarray:
        """Inference-mode probability maps ``(n, 1, H, W)``; restores the previous mode."""
        was_training = self.training
        self.eval()
        try:
            return self.forward(x)["pred"]
        finally:
            if was_training:
                self.train()

    def state_records(self) -> list[tuple[str, np.ndarray]]:
        return [(k, t.data) for k, t in self.params.items()] + list(self.buffers.items())


def build_tdcedn(input_channels: int = 3, seed: int = 0, **kwargs) -> TDCEDN:
    return TDCEDN(input_channels=input_channels, seed=seed, **kwargs)


def refined_module(decoder_feat, encoder_skip, module: RefinedModule):
    return module.forward(decoder_feat, encoder_skip)


def side_head_forward(feat, head: SideHead, input_hw) -> np.ndarray:
    return head.forward(feat, input_hw)[0]


# ----------------------------------------------------------------- checkpoints


def save_checkpoint(graph: TDCEDN, path) -> None:
    write_records(path, graph.precision, graph.state_records())


def load_checkpoint(path, graph: TDCEDN | None = None, dropout_rate: float = L.DROPOUT_RATE) -> TDCEDN:
    """Load a checkpoint into ``graph`` (validated) or into a freshly built graph.

    Without a target graph the stage widths and input channels are recovered
    from the encoder weight shapes.
    """
    precision, records = read_records(path)
    if graph is None:
        try:
            widths = [records[f"enc{s}_1.conv.weight"].shape[0] for s in range(1, 6)]
            c_in = records["enc1_1.conv.weight"].shape[1]
        except KeyError as exc:
            raise SchemaError(f"{path}: missing encoder record {exc}") from None
        graph = TDCEDN(widths, c_in, dropout_rate=dropout_rate, precision=precision, init=False)
    elif graph.precision is not precision:
        raise SchemaError(f"{path}: precision {precision.value} != graph precision {graph.precision.value}")
    expected = OrderedDict(graph.state_records())
    missing = [k for k in expected if k not in records]
    extra = [k for k in records if k not in expected]
    if missing or extra:
        raise SchemaError(f"{path}: missing records {missing[:5]}, unexpected records {extra[:5]}")
    for name, arr in expected.items():
        if records[name].shape != arr.shape:
            raise SchemaError(f"{path}: {name} has shape {records[name].shape}, network expects {arr.shape}")
    for name, arr in expected.items():
        arr[...] = records[name]
    return graph
