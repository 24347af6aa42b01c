"""Genome -> ExecutionPlan -> forward pass.

Compilation resolves every tensor shape up front. Connectives whose inputs
disagree get an explicit :class:`Coercion` (adaptive average pooling), and
the running sum of activation elements is compared against the memory limit:
the first step that pushes it over becomes the truncation point and the
network output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .genome import Genome, NodeKind, ResizeTarget
from .ops import ActivationKind, ConnectiveKind, ConvSpec, NormKind
from .tensor import NumericError, ShapeError, Tensor, parameter

Shape = tuple[int, int, int]


@dataclass(frozen=True)
class Coercion:
    """Input ``slot`` of a step is pooled from ``source`` to ``target`` shape."""
    slot: int
    source: Shape
    target: Shape


@dataclass(frozen=True)
class Step:
    node: int
    op: str                                    # NodeKind value or "PassThrough"
    inputs: tuple[int, ...]
    shape: Shape
    coercions: tuple[Coercion, ...] = ()
    convs: tuple[ConvSpec, ...] = ()           # spatial conv, then optional 1x1 pointwise
    activation: ActivationKind = ActivationKind.NONE
    norm: NormKind = NormKind.NONE
    resize_target: ResizeTarget | None = None

    @property
    def elements(self) -> int:
        c, h, w = self.shape
        return c * h * w


@dataclass(frozen=True)
class ExecutionPlan:
    steps: tuple[Step, ...]
    input_shape: Shape
    mem_limit: int
    truncated_at: int | None = None
    memory_elements: int = 0
    parameter_count: int = 0

    @property
    def output_step(self) -> Step:
        return self.steps[-1]

    @property
    def output_shape(self) -> Shape:
        return self.steps[-1].shape


def _step_params(step: Step) -> int:
    n = sum(spec.parameter_count() for spec in step.convs)
    if step.convs:
        if step.activation is ActivationKind.PRELU:
            n += 1
        if step.norm is NormKind.BATCH:
            n += 2 * step.shape[0]
    return n


def estimate_memory(plan: ExecutionPlan) -> int:
    """Sum of c*h*w over executed steps (activations only, per sample)."""
    return sum(s.elements for s in plan.steps)


def count_parameters(plan: ExecutionPlan) -> int:
    return sum(_step_params(s) for s in plan.steps)


def _conv_specs(conv, c_in: int) -> tuple[ConvSpec, ...]:
    c_out = conv.channel_rule.resolve(c_in)
    common = dict(kernel=conv.kernel, stride=conv.stride, transposed=conv.transposed,
                  weight_norm=conv.weight_norm)
    if not conv.separable:
        return (ConvSpec(c_in, c_out, bias=conv.bias, **common),)
    if c_out % c_in == 0:
        return (ConvSpec(c_in, c_out, separable_depthwise=True, bias=conv.bias, **common),)
    depthwise = ConvSpec(c_in, c_in, separable_depthwise=True, bias=False, **common)
    pointwise = ConvSpec(c_in, c_out, kernel=1, stride=1, weight_norm=conv.weight_norm, bias=conv.bias)
    return depthwise, pointwise


def compile_genome(g: Genome, input_shape: Shape, mem_limit: int) -> ExecutionPlan:
    if mem_limit < 1:
        raise ValueError("mem_limit must be positive")
    input_shape = tuple(int(v) for v in input_shape)
    steps = [Step(0, NodeKind.INPUT.value, (), input_shape)]
    shapes: list[Shape] = [input_shape]
    running = steps[0].elements
    truncated = 0 if running > mem_limit else None

    for i in range(1, len(g.nodes)):
        if truncated is not None:
            break
        node = g.nodes[i]
        preds = tuple(g.predecessors(i))
        c, h, w = shapes[preds[0]]
        kind = NodeKind(node.kind)
        if kind is NodeKind.CONV:
            specs = _conv_specs(node.conv, c)
            oh, ow = ops.conv_output_hw(h, w, node.conv.stride, node.conv.transposed)
            step = Step(i, kind.value, preds, (specs[-1].out_channels, oh, ow), convs=specs,
                        activation=node.conv.activation, norm=node.conv.norm)
        elif kind is NodeKind.MAXPOOL:
            if h < 2 or w < 2:
                step = Step(i, "PassThrough", preds, (c, h, w))
            else:
                step = Step(i, kind.value, preds, (c, h // 2, w // 2))
        elif kind is NodeKind.UPSAMPLE:
            step = Step(i, kind.value, preds, (c, 2 * h, 2 * w))
        else:
            if len(preds) == 1:
                preds = (preds[0], preds[0])
            sa, sb = shapes[preds[0]], shapes[preds[1]]
            first = node.resize_target is ResizeTarget.FIRST
            tgt, other_slot = (sa, 1) if first else (sb, 0)
            other = sb if first else sa
            if kind is NodeKind.CONCAT:
                coerced = (other[0], tgt[1], tgt[2])
                out = (sa[0] + sb[0], tgt[1], tgt[2])
            else:
                coerced = tgt
                out = tgt
            coercions = (Coercion(other_slot, other, coerced),) if coerced != other else ()
            step = Step(i, kind.value, preds, out, coercions=coercions,
                        resize_target=ResizeTarget(node.resize_target))
        steps.append(step)
        shapes.append(step.shape)
        running += step.elements
        if running > mem_limit:
            truncated = i

    plan = ExecutionPlan(tuple(steps), input_shape, int(mem_limit), truncated)
    return ExecutionPlan(plan.steps, plan.input_shape, plan.mem_limit, truncated,
                         estimate_memory(plan), count_parameters(plan))


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass
class Parameters:
    tensors: dict[str, Tensor] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def trainable(self) -> list[Tensor]:
        return [self.tensors[k] for k in sorted(self.tensors)]

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self) -> Parameters:
        return Parameters(
            {k: parameter(v.data.copy(), v.dtype) for k, v in self.tensors.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )

    def astype(self, dtype) -> Parameters:
        return Parameters(
            {k: parameter(v.data.astype(dtype), dtype) for k, v in self.tensors.items()},
            {k: v.astype(dtype) for k, v in self.buffers.items()},
        )

    def arrays(self) -> dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.tensors.items()}
        out.update(self.buffers)
        return out


def init_parameters(plan: ExecutionPlan, rng: np.random.Generator, dtype=np.float32) -> Parameters:
    """Kaiming-uniform conv weights, zero biases, unit/zero norm affines, PReLU slope 0.25."""
    p = Parameters()
    for step in plan.steps:
        if not step.convs:
            continue
        pre = f"n{step.node}"
        for ci, spec in enumerate(step.convs):
            name = f"{pre}.conv{ci}"
            bound = math.sqrt(6.0 / spec.fan_in)
            v = rng.uniform(-bound, bound, size=spec.weight_shape)
            p.tensors[f"{name}.weight"] = parameter(v, dtype)
            if spec.bias:
                p.tensors[f"{name}.bias"] = parameter(np.zeros(spec.out_channels), dtype)
            if spec.weight_norm:
                p.tensors[f"{name}.gain"] = parameter(_filter_norms(v, spec), dtype)
        c = step.shape[0]
        if step.activation is ActivationKind.PRELU:
            p.tensors[f"{pre}.prelu"] = parameter(np.full(1, 0.25), dtype)
        if step.norm is NormKind.BATCH:
            p.tensors[f"{pre}.bn.weight"] = parameter(np.ones(c), dtype)
            p.tensors[f"{pre}.bn.bias"] = parameter(np.zeros(c), dtype)
            p.buffers[f"{pre}.bn.mean"] = np.zeros(c, dtype=dtype)
            p.buffers[f"{pre}.bn.var"] = np.ones(c, dtype=dtype)
    return p


def _filter_norms(v: np.ndarray, spec: ConvSpec) -> np.ndarray:
    if not spec.transposed:
        return np.sqrt((v * v).sum(axis=(1, 2, 3)))
    g = spec.groups
    v5 = v.reshape(g, spec.in_channels // g, spec.out_channels // g, spec.kernel, spec.kernel)
    return np.sqrt((v5 * v5).sum(axis=(1, 3, 4))).reshape(-1)


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------

def _run_step(step: Step, inputs: list[Tensor], params: Parameters, training: bool) -> Tensor:
    op = step.op
    if op in (NodeKind.INPUT.value, "PassThrough"):
        return inputs[0]
    if op == NodeKind.MAXPOOL.value:
        return ops.max_pool_2x2(inputs[0])
    if op == NodeKind.UPSAMPLE.value:
        return ops.upsample_nn_2x(inputs[0])
    if op == NodeKind.CONV.value:
        pre = f"n{step.node}"
        t = params.tensors
        y = inputs[0]
        for ci, spec in enumerate(step.convs):
            name = f"{pre}.conv{ci}"
            y = ops.conv2d(y, spec, t[f"{name}.weight"], t.get(f"{name}.bias"), t.get(f"{name}.gain"))
        y = ops.activation(y, step.activation, t.get(f"{pre}.prelu"))
        if step.norm is NormKind.BATCH:
            return ops.normalize(
                y, step.norm,
                {"weight": t[f"{pre}.bn.weight"], "bias": t[f"{pre}.bn.bias"]},
                {"mean": params.buffers[f"{pre}.bn.mean"], "var": params.buffers[f"{pre}.bn.var"]},
                training)
        return ops.normalize(y, step.norm)
    a, b = inputs
    return ops.connective(ConnectiveKind(op), a, b, step.resize_target)


def execute(plan: ExecutionPlan, params: Parameters, x: Tensor, target_shape: Shape,
            training: bool = False, trace: list | None = None) -> Tensor:
    """Run the plan and coerce the last computed tensor to ``target_shape``.

    If ``trace`` is a list, each step's actual (c, h, w) is appended to it.
    """
    if tuple(x.shape[1:]) != plan.input_shape:
        raise ShapeError(f"input shape {x.shape[1:]} != plan input {plan.input_shape}")
    stack: dict[int, Tensor] = {}
    y = x
    for step in plan.steps:
        y = _run_step(step, [stack[j] for j in step.inputs] or [x], params, training)
        stack[step.node] = y
        if trace is not None:
            trace.append(tuple(y.shape[1:]))
    out = ops.adaptive_avg_pool3d(y, target_shape)
    if not np.all(np.isfinite(out.data)):
        raise NumericError("non-finite network output")
    return out


class Network:
    """A compiled plan bound to its parameters."""

    def __init__(self, plan: ExecutionPlan, params: Parameters | None = None,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        self.plan = plan
        self.params = params if params is not None else init_parameters(
            plan, rng if rng is not None else np.random.default_rng(0), dtype)

    def __call__(self, x, target_shape: Shape, training: bool = False) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        return execute(self.plan, self.params, x, target_shape, training)


# ---------------------------------------------------------------------------
# pretty printing
# ---------------------------------------------------------------------------

def _describe_conv(spec: ConvSpec) -> str:
    k, s, p = spec.kernel, spec.stride, spec.padding
    name = "ConvTranspose2d" if spec.transposed else "Conv2d"
    parts = [f"{spec.in_channels}, {spec.out_channels}", f"kernel_size=({k}, {k})",
             f"stride=({s}, {s})"]
    if p:
        parts.append(f"padding=({p}, {p})")
    if spec.transposed and s == 2:
        parts.append("output_padding=(1, 1)")
    if spec.groups > 1:
        parts.append(f"groups={spec.groups}")
    if not spec.bias:
        parts.append("bias=False")
    text = f"{name}({', '.join(parts)})"
    return f"weight_norm({text})" if spec.weight_norm else text


_ACT_TEXT = {
    ActivationKind.RELU: "ReLU()", ActivationKind.PRELU: "PReLU(num_parameters=1)",
    ActivationKind.ELU: "ELU(alpha=1.0)", ActivationKind.SELU: "SELU()",
    ActivationKind.TANH: "Tanh()", ActivationKind.SIGMOID: "Sigmoid()",
    ActivationKind.SOFTMAX: "Softmax2d()",
}


def _describe_norm(kind: NormKind, c: int) -> str | None:
    if kind is NormKind.BATCH:
        return f"BatchNorm2d({c}, eps=1e-05, momentum=0.1, affine=True, track_running_stats=True)"
    if kind is NormKind.INSTANCE:
        return f"InstanceNorm2d({c}, eps=1e-05, momentum=0.1, affine=False, track_running_stats=False)"
    if kind is NormKind.LRN:
        return f"LocalResponseNorm({c}, alpha=0.0001, beta=0.75, k=1)"
    if kind is NormKind.SOFTMAX:
        return "Softmax2d()"
    return None


def describe_step(step: Step) -> list[str]:
    if step.op == NodeKind.INPUT.value:
        return ["Input node"]
    if step.op == "PassThrough":
        return ["pass-through (max pool on a 1-pixel input)"]
    if step.op == NodeKind.MAXPOOL.value:
        return ["maxpool 2x2"]
    if step.op == NodeKind.UPSAMPLE.value:
        return ["upsample"]
    if step.op == NodeKind.CONV.value:
        lines = [f"(conv): {_describe_conv(s)}" for s in step.convs]
        if step.activation is not ActivationKind.NONE:
            lines.append(f"(activ): {_ACT_TEXT[step.activation]}")
        norm = _describe_norm(step.norm, step.shape[0])
        if norm:
            lines.append(f"(norm): {norm}")
        return lines
    target = "first" if step.resize_target is ResizeTarget.FIRST else "second"
    return [f"{step.op.lower()} - resize to {target}"]


def format_plan(plan: ExecutionPlan, optimizer=None) -> str:
    """Render the plan as a node / inputs / type table."""
    lines = []
    if optimizer is not None:
        lines += [f"Optimizer: {getattr(optimizer.kind, 'value', optimizer.kind)}",
                  f"Initial learning rate: {optimizer.lr0:.6f}",
                  f"Learning rate decay factor: {optimizer.decay:.6f}"]
    lines.append(f"{'Node':>4} | {'Input(s)':<9} | {'Output (c,h,w)':<16} | Node type")
    lines.append("-" * 72)
    for step in plan.steps:
        desc = describe_step(step)
        ins = ", ".join(str(j) for j in step.inputs)
        shape = "x".join(str(v) for v in step.shape)
        lines.append(f"{step.node:>4} | {ins:<9} | {shape:<16} | {desc[0]}")
        lines += [f"{'':>4} | {'':<9} | {'':<16} | {d}" for d in desc[1:]]
    lines.append("-" * 72)
    trunc = "none" if plan.truncated_at is None else f"step {plan.truncated_at}"
    lines.append(f"memory elements: {plan.memory_elements}  parameters: {plan.parameter_count}  "
                 f"truncated: {trunc}")
    return "\n".join(lines) + "\n"
