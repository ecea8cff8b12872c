"""Finite event trees, adapted/predictable processes, and the discrete
stochastic calculus used everywhere else.

Conventions (exact on finite filtrations):
  * integrals are predictable Riemann sums over one-step increments,
  * the stochastic exponential is the product of (1 + increment),
  * quadratic covariation is the sum of products of jumps,
  * there is no continuous martingale part.

Nodes are numbered breadth-first (root = 0, then level by level in the
order branches were declared), so every parent index is smaller than its
children and reports are bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolationError

PROB_TOL = 1e-12


class EventTree:
    """Finite filtered probability space: a rooted tree with transition
    probabilities, all leaves at the same depth."""

    def __init__(self, parent, prob, time=None):
        parent = np.asarray(parent, dtype=np.int64)
        prob = np.asarray(prob, dtype=float)
        n = parent.shape[0]
        if n == 0 or parent[0] != -1:
            raise ContractViolationError("node 0 must be the root (parent -1)")
        if prob.shape != (n,):
            raise ContractViolationError("prob must have one entry per node")
        if np.any(parent[1:] >= np.arange(1, n)) or np.any(parent[1:] < 0):
            raise ContractViolationError("nodes must be numbered parents-first")
        if np.any(prob[1:] <= 0.0) or np.any(prob[1:] > 1.0):
            raise ContractViolationError("transition probabilities must lie in (0, 1]")

        self.parent = parent
        self.n_nodes = n
        if time is None:
            time = np.zeros(n, dtype=np.int64)
            for i in range(1, n):
                time[i] = time[parent[i]] + 1
        self.time = np.asarray(time, dtype=np.int64)
        if np.any(np.diff(self.time) < 0):
            raise ContractViolationError("node order must be breadth-first in time")

        children: list[list[int]] = [[] for _ in range(n)]
        for i in range(1, n):
            children[parent[i]].append(i)
        self.children = [np.asarray(c, dtype=np.int64) for c in children]
        self.steps = int(self.time.max())
        self.leaves = np.flatnonzero([len(c) == 0 for c in children])
        if np.any(self.time[self.leaves] != self.steps):
            raise ContractViolationError("every root-to-leaf path must have the same length")

        # renormalize child probabilities; reject if they are not already
        # within PROB_TOL of summing to one
        self.prob = prob.copy()
        self.prob[0] = 1.0
        for node in self.internal_nodes:
            c = self.children[node]
            s = self.prob[c].sum()
            if abs(s - 1.0) > PROB_TOL:
                raise ContractViolationError(
                    f"child probabilities at node {node} sum to {s!r}, not 1"
                )
            self.prob[c] /= s

        self.path_prob = np.ones(n)
        p1 = self.parent[1:]
        for i in range(1, n):
            self.path_prob[i] = self.path_prob[parent[i]] * self.prob[i]
        if abs(self.path_prob[self.leaves].sum() - 1.0) > PROB_TOL:
            raise ContractViolationError("leaf probabilities do not sum to 1")

        self._leaf_pos = {int(l): k for k, l in enumerate(self.leaves)}

    @property
    def internal_nodes(self):
        return np.flatnonzero([len(c) > 0 for c in self.children])

    @property
    def n_leaves(self):
        return len(self.leaves)

    @property
    def leaf_prob(self):
        return self.path_prob[self.leaves]

    def is_leaf(self, node) -> bool:
        return len(self.children[node]) == 0

    def leaf_position(self, node) -> int:
        return self._leaf_pos[int(node)]

    # -- measure helpers -------------------------------------------------

    def node_mass(self, leaf_weights) -> np.ndarray:
        """Total weight of the leaves below each node."""
        leaf_weights = np.asarray(leaf_weights, dtype=float)
        mass = np.zeros(self.n_nodes)
        mass[self.leaves] = leaf_weights
        for i in range(self.n_nodes - 1, 0, -1):
            mass[self.parent[i]] += mass[i]
        return mass

    def conditional_expectation(self, leaf_weights, leaf_values) -> np.ndarray:
        """E[Z | F_t] as a node array, under the measure given by leaf weights."""
        leaf_weights = np.asarray(leaf_weights, dtype=float)
        leaf_values = np.asarray(leaf_values, dtype=float)
        acc = np.zeros(self.n_nodes)
        mass = np.zeros(self.n_nodes)
        acc[self.leaves] = leaf_weights * leaf_values
        mass[self.leaves] = leaf_weights
        for i in range(self.n_nodes - 1, 0, -1):
            acc[self.parent[i]] += acc[i]
            mass[self.parent[i]] += mass[i]
        if np.any(mass <= 0.0):
            raise ContractViolationError("conditional expectation under a vanishing measure")
        return acc / mass

    def child_weights(self, leaf_weights):
        """Per-node conditional one-step probabilities (list indexed by node)."""
        mass = self.node_mass(leaf_weights)
        out = [None] * self.n_nodes
        for node in self.internal_nodes:
            c = self.children[node]
            out[node] = mass[c] / mass[node]
        return out

    def martingale_defect(self, values, leaf_weights) -> float:
        """max_n |E[ΔZ | n]| for a node-indexed scalar process."""
        values = np.asarray(values, dtype=float)
        worst = 0.0
        for node, w in zip(self.internal_nodes, self._iter_child_weights(leaf_weights)):
            c = self.children[node]
            worst = max(worst, abs(float(w @ values[c]) - values[node]))
        return worst

    def _iter_child_weights(self, leaf_weights):
        mass = self.node_mass(leaf_weights)
        for node in self.internal_nodes:
            c = self.children[node]
            yield mass[c] / mass[node]

    def propagate_down(self, child_values) -> np.ndarray:
        """Extend values given on the children of one generation to all
        descendants (constant along paths).  `child_values` maps node id to
        value; unspecified nodes inherit from their parent (root gets 0)."""
        out = np.zeros(self.n_nodes)
        for i in range(1, self.n_nodes):
            out[i] = child_values.get(i, out[self.parent[i]])
        return out


# ---------------------------------------------------------------------------
# processes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdaptedProcess:
    """Process with one value (scalar or fixed-length vector) per node.

    A process built from one-step increments keeps them verbatim so that
    round trips through files are bit-stable (differencing accumulated
    floats does not always recover the increments exactly)."""

    tree: EventTree
    values: np.ndarray = field(repr=False)
    inc: np.ndarray = field(repr=False, default=None, compare=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape[0] != self.tree.n_nodes or v.ndim > 2:
            raise ContractViolationError("values must be (n_nodes,) or (n_nodes, dim)")
        object.__setattr__(self, "values", v)
        if self.inc is not None and np.shape(self.inc) != v.shape:
            raise ContractViolationError("cached increments must match the value shape")

    @classmethod
    def from_increments(cls, tree: EventTree, inc, start=0.0) -> "AdaptedProcess":
        inc = np.asarray(inc, dtype=float)
        vals = np.empty_like(inc)
        vals[0] = start
        for i in range(1, tree.n_nodes):
            vals[i] = vals[tree.parent[i]] + inc[i]
        return cls(tree, vals, inc=inc)

    @property
    def dim(self) -> int:
        return 1 if self.values.ndim == 1 else self.values.shape[1]

    @property
    def terminal(self) -> np.ndarray:
        return self.values[self.tree.leaves]

    def increments(self) -> np.ndarray:
        """ΔX indexed by non-root node (row 0 is zero)."""
        if self.inc is not None:
            return self.inc
        d = np.zeros_like(self.values)
        d[1:] = self.values[1:] - self.values[self.tree.parent[1:]]
        return d

    def component(self, i: int) -> "AdaptedProcess":
        return AdaptedProcess(self.tree, self.values[:, i])

    def __add__(self, other):
        return AdaptedProcess(self.tree, self.values + _raw(other))

    def __sub__(self, other):
        return AdaptedProcess(self.tree, self.values - _raw(other))

    def __mul__(self, other):
        return AdaptedProcess(self.tree, self.values * _raw(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return AdaptedProcess(self.tree, self.values / _raw(other))


def _raw(x):
    return x.values if isinstance(x, AdaptedProcess) else x


@dataclass(frozen=True)
class PredictableProcess:
    """Process known one step ahead: defined on non-root nodes and equal
    across siblings.  Row 0 is unused and kept at zero."""

    tree: EventTree
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape[0] != self.tree.n_nodes or v.ndim > 2:
            raise ContractViolationError("values must be (n_nodes,) or (n_nodes, dim)")
        v = v.copy()
        v[0] = 0.0
        for node in self.tree.internal_nodes:
            c = self.tree.children[node]
            if not np.all(v[c] == v[c[0]]):
                raise ContractViolationError(
                    f"predictable process differs across siblings of node {node}"
                )
        object.__setattr__(self, "values", v)

    @classmethod
    def from_steps(cls, tree: EventTree, step_values) -> "PredictableProcess":
        """Build from per-parent values: step_values[n] is the value carried
        on the step from node n to each of its children."""
        step_values = np.asarray(step_values, dtype=float)
        shape = (tree.n_nodes,) if step_values.ndim == 1 else (tree.n_nodes, step_values.shape[1])
        v = np.zeros(shape)
        for node in tree.internal_nodes:
            v[tree.children[node]] = step_values[node]
        return cls(tree, v)

    @property
    def dim(self) -> int:
        return 1 if self.values.ndim == 1 else self.values.shape[1]

    def step_value(self, node):
        """Value used on the step out of `node` (any child's row)."""
        return self.values[self.tree.children[node][0]]

    def __mul__(self, scalar):
        return PredictableProcess(self.tree, self.values * scalar)

    __rmul__ = __mul__

    def __add__(self, other):
        return PredictableProcess(self.tree, self.values + other.values)

    def __sub__(self, other):
        return PredictableProcess(self.tree, self.values - other.values)

    def __neg__(self):
        return PredictableProcess(self.tree, -self.values)


# ---------------------------------------------------------------------------
# calculus kernel
# ---------------------------------------------------------------------------


def stochastic_integral(H: PredictableProcess, X: AdaptedProcess) -> AdaptedProcess:
    """(H·X): starts at 0, increment H_n · ΔX_n at every non-root node."""
    tree = X.tree
    if H.tree is not tree and H.tree.n_nodes != tree.n_nodes:
        raise ContractViolationError("integrand and integrator live on different trees")
    dX = X.increments()
    if H.values.ndim != dX.ndim or (H.values.ndim == 2 and H.values.shape[1] != dX.shape[1]):
        raise ContractViolationError(
            f"integrand dimension {H.dim} does not match integrator dimension {X.dim}"
        )
    inc = H.values * dX if dX.ndim == 1 else np.einsum("nd,nd->n", H.values, dX)
    out = np.zeros(tree.n_nodes)
    for i in range(1, tree.n_nodes):
        out[i] = out[tree.parent[i]] + inc[i]
    return AdaptedProcess(tree, out)


def stochastic_exponential(X: AdaptedProcess) -> AdaptedProcess:
    """Product of (1 + ΔX) along paths; requires X_0 = 0.  Zero is absorbing;
    negative values are allowed (positivity is the caller's concern)."""
    if X.values.ndim != 1:
        raise ContractViolationError("stochastic exponential is defined for scalar processes")
    if X.values[0] != 0.0:
        raise ContractViolationError("stochastic exponential requires X_0 = 0")
    dX = X.increments()
    out = np.ones(X.tree.n_nodes)
    for i in range(1, X.tree.n_nodes):
        out[i] = out[X.tree.parent[i]] * (1.0 + dX[i])
    return AdaptedProcess(X.tree, out)


def quadratic_covariation(X: AdaptedProcess, Y: AdaptedProcess) -> AdaptedProcess:
    """[X, Y]: running sum of products of jumps; requires X_0 = Y_0 = 0."""
    if X.values.ndim != 1 or Y.values.ndim != 1:
        raise ContractViolationError("quadratic covariation is defined for scalar processes")
    if X.values[0] != 0.0 or Y.values[0] != 0.0:
        raise ContractViolationError("quadratic covariation requires X_0 = Y_0 = 0")
    inc = X.increments() * Y.increments()
    out = np.zeros(X.tree.n_nodes)
    for i in range(1, X.tree.n_nodes):
        out[i] = out[X.tree.parent[i]] + inc[i]
    return AdaptedProcess(X.tree, out)
