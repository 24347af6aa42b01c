"""Genetic operators over genomes: mutation, repair, pruning, crossover.

Every public operator maps valid genomes to valid genomes.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .genome import (
    CONNECTIVE_KINDS, Genome, NodeGene, NodeKind, OptimizerGenes, ResizeTarget,
    freeze_matrix, random_conv_gene, random_node, random_optimizer, random_predecessors,
    required_arity,
)

MUTATION_RATE = 0.5


def _matrix(g: Genome) -> list[list[bool]]:
    return [list(row) for row in g.adjacency]


def repair(g: Genome) -> Genome:
    """Fix predecessor counts.

    Nodes short of inputs gain edges from the nearest preceding unconnected
    nodes; nodes with too many keep only their highest-indexed predecessors.
    """
    mat = _matrix(g)
    changed = False
    for i in range(1, len(g.nodes)):
        need = required_arity(g.nodes[i], i)
        preds = [j for j in range(i) if mat[i][j]]
        if len(preds) > need:
            for j in preds[:len(preds) - need]:
                mat[i][j] = False
            changed = True
        elif len(preds) < need:
            for j in range(i - 1, -1, -1):
                if not mat[i][j]:
                    mat[i][j] = True
                    preds.append(j)
                    if len(preds) == need:
                        break
            changed = True
        # entries on or above the diagonal are never legal
        for j in range(i, len(g.nodes)):
            if mat[i][j]:
                mat[i][j] = False
                changed = True
    if mat and mat[0] and any(mat[0]):
        mat[0] = [False] * len(mat[0])
        changed = True
    return replace(g, adjacency=freeze_matrix(mat)) if changed else g


def _subgraph(g: Genome, keep: list[int]) -> Genome:
    nodes = tuple(g.nodes[i] for i in keep)
    mat = [[g.adjacency[i][j] for j in keep] for i in keep]
    return Genome(nodes, freeze_matrix(mat), g.optimizer)


def prune(g: Genome) -> Genome:
    """Drop nodes with no directed path to the output (the last node)."""
    n = len(g.nodes)
    if n <= 1:
        return g
    live = {n - 1, 0}
    frontier = [n - 1]
    while frontier:
        i = frontier.pop()
        for j in g.predecessors(i):
            if j not in live:
                live.add(j)
                frontier.append(j)
    if len(live) == n:
        return g
    return _subgraph(g, sorted(live))


def insert_node(g: Genome, position: int, node: NodeGene, rng: np.random.Generator) -> Genome:
    """Insert ``node`` before ``position`` and wire it in.

    The new node draws its inputs from earlier nodes and, unless it becomes
    the output, feeds one randomly chosen later node.
    """
    n = len(g.nodes)
    old = _matrix(g)
    idx = [i if i < position else i + 1 for i in range(n)]
    mat = [[False] * (n + 1) for _ in range(n + 1)]
    for i in range(n):
        for j in range(n):
            if old[i][j]:
                mat[idx[i]][idx[j]] = True
    for j in random_predecessors(rng, node, position):
        mat[position][j] = True
    if position < n:
        succ = int(rng.integers(position + 1, n + 1))
        mat[succ][position] = True
    nodes = g.nodes[:position] + (node,) + g.nodes[position:]
    return Genome(nodes, freeze_matrix(mat), g.optimizer)


def delete_node(g: Genome, index: int) -> Genome:
    keep = [i for i in range(len(g.nodes)) if i != index]
    return _subgraph(g, keep)


def reinit_node(node: NodeGene, rate: float, rng: np.random.Generator) -> NodeGene:
    """Resample each hyperparameter of ``node`` with probability ``rate``."""
    if node.kind is NodeKind.CONV:
        fresh = random_conv_gene(rng)
        fields = {}
        for name in fresh.__dataclass_fields__:
            if rng.random() < rate:
                fields[name] = getattr(fresh, name)
        return replace(node, conv=replace(node.conv, **fields)) if fields else node
    if node.is_connective:
        kind, target = node.kind, node.resize_target
        if rng.random() < rate:
            kind = CONNECTIVE_KINDS[int(rng.integers(len(CONNECTIVE_KINDS)))]
        if rng.random() < rate:
            target = tuple(ResizeTarget)[int(rng.integers(2))]
        return NodeGene(kind, resize_target=target)
    return node


def mutate_topology(g: Genome, rng: np.random.Generator) -> Genome:
    """Flip one uniformly chosen bit strictly below the diagonal."""
    n = len(g.nodes)
    if n < 2:
        return g
    pairs = [(i, j) for i in range(1, n) for j in range(i)]
    i, j = pairs[int(rng.integers(len(pairs)))]
    mat = _matrix(g)
    mat[i][j] = not mat[i][j]
    return replace(g, adjacency=freeze_matrix(mat))


def mutate_primitives(g: Genome, rate: float, rng: np.random.Generator) -> Genome:
    """Add a node, delete a node, or reinitialise one node's hyperparameters."""
    n = len(g.nodes)
    op = int(rng.integers(3))
    if op == 0:
        position = int(rng.integers(1, n + 1))
        return insert_node(g, position, random_node(rng), rng)
    if n < 2:
        return g
    index = int(rng.integers(1, n))
    if op == 1:
        return delete_node(g, index)
    nodes = list(g.nodes)
    nodes[index] = reinit_node(nodes[index], rate, rng)
    return replace(g, nodes=tuple(nodes))


def mutate_optimizer(opt: OptimizerGenes, rate: float, rng: np.random.Generator) -> OptimizerGenes:
    fresh = random_optimizer(rng)
    return OptimizerGenes(
        kind=fresh.kind if rng.random() < rate else opt.kind,
        lr0=fresh.lr0 if rng.random() < rate else opt.lr0,
        decay=fresh.decay if rng.random() < rate else opt.decay,
    )


def mutate(g: Genome, rate: float, rng: np.random.Generator) -> Genome:
    """Apply each mutation operator with probability ``rate``, then repair and prune."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"mutation rate {rate} outside [0, 1]")
    out = g
    if rng.random() < rate:
        out = mutate_topology(out, rng)
    if rng.random() < rate:
        out = mutate_primitives(out, rate, rng)
    if rng.random() < rate:
        out = out.with_optimizer(mutate_optimizer(out.optimizer, rate, rng))
    if out is g:
        return g
    return prune(repair(out))


def crossover(a: Genome, b: Genome, rng: np.random.Generator) -> Genome:
    """Uniform crossover of optimizer genes, single-point crossover of nodes.

    The child takes nodes (and their adjacency rows) before the cut from
    ``a`` and the rest from ``b``.
    """
    pick = [rng.random() < 0.5 for _ in range(3)]
    oa, ob = a.optimizer, b.optimizer
    opt = OptimizerGenes(
        kind=oa.kind if pick[0] else ob.kind,
        lr0=oa.lr0 if pick[1] else ob.lr0,
        decay=oa.decay if pick[2] else ob.decay,
    )
    cut = int(rng.integers(1, min(len(a), len(b)) + 1))
    nodes = a.nodes[:cut] + b.nodes[cut:]
    n = len(nodes)
    mat = [[False] * n for _ in range(n)]
    for i in range(n):
        src = a if i < cut else b
        for j in range(min(i, len(src.nodes))):
            mat[i][j] = src.adjacency[i][j]
    return prune(repair(Genome(nodes, freeze_matrix(mat), opt)))


__all__ = [
    "MUTATION_RATE", "repair", "prune", "mutate", "crossover",
    "mutate_topology", "mutate_primitives", "mutate_optimizer", "insert_node", "delete_node",
    "reinit_node",
]
