"""Small fixed comparator: a 3-level encoder-decoder expressed as a genome.

Three resolutions (full, 1/2, 1/4), skip concatenations on the way up,
PReLU + batch norm in every hidden block, and a global residual from the
input. The output block projects to three channels.
"""

from __future__ import annotations

from .genome import ChannelRule, ConvGene, Genome, INPUT_NODE, NodeGene, NodeKind, OptimizerGenes, ResizeTarget
from .ops import ActivationKind, NormKind
from .optim import OptimizerKind


def _block(rule: ChannelRule, stride: int = 1, transposed: bool = False) -> NodeGene:
    return NodeGene(NodeKind.CONV, conv=ConvGene(
        channel_rule=rule, kernel=3, stride=stride, transposed=transposed,
        activation=ActivationKind.PRELU, norm=NormKind.BATCH))


def _join(kind: NodeKind, target: ResizeTarget = ResizeTarget.FIRST) -> NodeGene:
    return NodeGene(kind, resize_target=target)


def baseline_genome(lr0: float = 1e-3) -> Genome:
    nodes = [
        INPUT_NODE,
        _block(ChannelRule.QUADRUPLE),                       # 1: c*4, full res
        _block(ChannelRule.DOUBLE, stride=2),                # 2: 1/2 res
        _block(ChannelRule.DOUBLE, stride=2),                # 3: 1/4 res
        _block(ChannelRule.HALF, stride=2, transposed=True),  # 4: back to 1/2
        _join(NodeKind.CONCAT),                              # 5: skip from 2
        _block(ChannelRule.QUARTER, stride=2, transposed=True),  # 6: back to full
        _join(NodeKind.CONCAT),                              # 7: skip from 1
        NodeGene(NodeKind.CONV, conv=ConvGene(channel_rule=ChannelRule.THREE, kernel=3)),
        _join(NodeKind.ADD, ResizeTarget.SECOND),            # 9: global residual
    ]
    inputs = [[], [0], [1], [2], [3], [2, 4], [5], [1, 6], [7], [0, 8]]
    return Genome.from_edges(nodes, inputs, OptimizerGenes(OptimizerKind.ADAM, lr0, 0.0))
