"""Decision diagrams for linear pseudo-Boolean constraints over bit-encoded integers.

Pipeline: encode integer variables as fixed-width binary, turn each linear
(in)equality into a pseudo-Boolean constraint over the bits, compile it into a
reduced ordered binary decision diagram (hash-consed, one fixed global variable
order), conjoin the diagrams, count models exactly, and parameterize each
decision with branch probabilities proportional to the model counts beneath it.
Sampling from that parameterization is uniform over all models, so every drawn
action is valid by construction.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .autodiff import as_generator
from .samplers import SampleDataset


class CompileBudgetError(RuntimeError):
    """Node budget exceeded during compilation; carries the peak level width."""

    def __init__(self, message, peak_width=None):
        super().__init__(message)
        self.peak_width = peak_width


@dataclass(frozen=True)
class PbConstraint:
    """Linear constraint sum_i coeffs[i] * b_i <comparator> threshold over bits."""

    coeffs: tuple
    comparator: str  # "le" or "eq"
    threshold: float

    def __post_init__(self):
        if self.comparator not in ("le", "eq"):
            raise ValueError("comparator must be 'le' or 'eq'")
        if not all(np.isfinite(c) for c in self.coeffs):
            raise ValueError("coefficients must be finite")
        if not np.isfinite(self.threshold):
            raise ValueError("threshold must be finite")


class DiagramNode:
    """Terminal or decision node; identity is managed by the owning manager."""

    __slots__ = ("var", "lo", "hi", "id")

    def __init__(self, var, lo, hi, node_id):
        self.var = var
        self.lo = lo
        self.hi = hi
        self.id = node_id

    @property
    def is_terminal(self):
        return self.lo is None

    def __repr__(self):
        if self.is_terminal:
            return f"<terminal {'T' if self.id == 1 else 'F'}>"
        return f"<node {self.id} var={self.var}>"


class DiagramManager:
    """Owns the unique table and terminals for one fixed variable order.

    Compilation mutates the unique table and is single-threaded per manager;
    finished diagrams are immutable.
    """

    def __init__(self, n_vars, node_budget=2_000_000):
        self.n_vars = int(n_vars)
        self.node_budget = int(node_budget)
        self.false = DiagramNode(self.n_vars, None, None, 0)
        self.true = DiagramNode(self.n_vars, None, None, 1)
        self._nodes = [self.false, self.true]
        self._unique = {}
        self._conjoin_cache = {}

    def _owned(self, node):
        return (0 <= node.id < len(self._nodes)) and self._nodes[node.id] is node

    def _require_owned(self, *nodes):
        for node in nodes:
            if not isinstance(node, DiagramNode) or not self._owned(node):
                raise ValueError("node belongs to a different manager (variable order mismatch)")

    def node(self, var, lo, hi):
        """Hash-consed reduced node constructor."""
        if lo is hi:
            return lo
        key = (var, lo.id, hi.id)
        found = self._unique.get(key)
        if found is not None:
            return found
        if len(self._nodes) >= self.node_budget:
            raise CompileBudgetError(
                f"node budget {self.node_budget} exceeded", peak_width=self.peak_width())
        fresh = DiagramNode(var, lo, hi, len(self._nodes))
        self._nodes.append(fresh)
        self._unique[key] = fresh
        return fresh

    def peak_width(self):
        width = {}
        for node in self._nodes[2:]:
            width[node.var] = width.get(node.var, 0) + 1
        return max(width.values(), default=0)

    def n_nodes(self, root=None):
        """Decision-node count; of the whole table, or reachable from a root."""
        if root is None:
            return len(self._nodes) - 2
        self._require_owned(root)
        seen = set()
        stack = [root]
        while stack:
            node = stack.pop()
            if node.is_terminal or node.id in seen:
                continue
            seen.add(node.id)
            stack.extend((node.lo, node.hi))
        return len(seen)

    # -- compilation -----------------------------------------------------------

    def compile_pb(self, pb):
        """Compile one PB constraint by DP on reachable partial sums.

        States (level, partial sum) are pruned against suffix bounds: once the
        remaining coefficients cannot change the outcome the whole interval of
        completions collapses to a terminal.
        """
        coeffs = np.asarray(pb.coeffs, dtype=np.float64)
        if coeffs.size != self.n_vars:
            raise ValueError(f"expected {self.n_vars} coefficients, got {coeffs.size}")
        pos_suffix = np.concatenate([np.cumsum(np.maximum(coeffs, 0.0)[::-1])[::-1], [0.0]])
        neg_suffix = np.concatenate([np.cumsum(np.minimum(coeffs, 0.0)[::-1])[::-1], [0.0]])
        threshold = float(pb.threshold)
        is_eq = pb.comparator == "eq"
        memo = {}

        def build(level, acc):
            if is_eq:
                if acc + pos_suffix[level] < threshold or acc + neg_suffix[level] > threshold:
                    return self.false
                if level == self.n_vars:
                    return self.true if acc == threshold else self.false
                if pos_suffix[level] == 0.0 and neg_suffix[level] == 0.0:
                    return self.true if acc == threshold else self.false
            else:
                if acc + pos_suffix[level] <= threshold:
                    return self.true
                if acc + neg_suffix[level] > threshold:
                    return self.false
            key = (level, acc)
            found = memo.get(key)
            if found is not None:
                return found
            lo = build(level + 1, acc)
            hi = build(level + 1, acc + coeffs[level])
            result = self.node(level, lo, hi)
            memo[key] = result
            return result

        return build(0, 0.0)

    def conjoin(self, d1, d2):
        """AND of two diagrams over this manager's variable order."""
        self._require_owned(d1, d2)
        cache = self._conjoin_cache

        def walk(a, b):
            if a is self.false or b is self.false:
                return self.false
            if a is self.true:
                return b
            if b is self.true:
                return a
            if a is b:
                return a
            key = (a.id, b.id) if a.id <= b.id else (b.id, a.id)
            found = cache.get(key)
            if found is not None:
                return found
            v = min(a.var, b.var)
            a_lo, a_hi = (a.lo, a.hi) if a.var == v else (a, a)
            b_lo, b_hi = (b.lo, b.hi) if b.var == v else (b, b)
            result = self.node(v, walk(a_lo, b_lo), walk(a_hi, b_hi))
            cache[key] = result
            return result

        return walk(d1, d2)

    def conjoin_all(self, diagrams):
        result = self.true
        for d in diagrams:
            result = self.conjoin(result, d)
        return result

    # -- counting ---------------------------------------------------------------

    def model_count(self, root):
        """Exact number of satisfying assignments over all n_vars variables."""
        self._require_owned(root)
        counts = self._suffix_counts(root)
        return counts[root.id] << root.var

    def _suffix_counts(self, root):
        # counts[node] = models over variables [node.var, n); skipped levels
        # between a node and its child contribute a factor of 2 each.
        counts = {0: 0, 1: 1}
        stack = [root]
        while stack:
            node = stack[-1]
            if node.id in counts:
                stack.pop()
                continue
            pending = [c for c in (node.lo, node.hi) if c.id not in counts]
            if pending:
                stack.extend(pending)
                continue
            lo_models = counts[node.lo.id] << (node.lo.var - node.var - 1)
            hi_models = counts[node.hi.id] << (node.hi.var - node.var - 1)
            counts[node.id] = lo_models + hi_models
            stack.pop()
        return counts


def evaluate(root, assignment):
    """Truth value of the diagram under a full 0/1 assignment."""
    node = root
    while not node.is_terminal:
        node = node.hi if assignment[node.var] else node.lo
    return node.id == 1


class Psdd:
    """Uniform distribution over the models of a diagram.

    Each decision's hi-branch probability is the fraction of the node's models
    that set its variable true; skipped levels are unbiased coin flips. Every
    model then has probability exactly 1/(total model count).
    """

    def __init__(self, manager, root):
        manager._require_owned(root)
        self.manager = manager
        self.root = root
        self._counts = manager._suffix_counts(root)
        self.total_models = self._counts[root.id] << root.var
        if self.total_models == 0:
            raise ValueError("cannot parameterize a diagram with zero models")
        self._hi_prob = {}
        stack, seen = [root], set()
        while stack:
            node = stack.pop()
            if node.is_terminal or node.id in seen:
                continue
            seen.add(node.id)
            hi_models = self._counts[node.hi.id] << (node.hi.var - node.var - 1)
            node_models = self._counts[node.id]
            self._hi_prob[node.id] = hi_models / node_models
            stack.extend((node.lo, node.hi))
        self.n_decision_nodes = len(seen)

    @property
    def n_vars(self):
        return self.manager.n_vars

    def sample_bits(self, count, seed=0):
        """(count, n_vars) uint8 matrix of models drawn uniformly."""
        rng = as_generator(seed)
        n = self.n_vars
        out = np.empty((count, n), dtype=np.uint8)
        for i in range(count):
            coins = rng.random(n)
            node = self.root
            var = 0
            row = out[i]
            while var < n:
                if node.is_terminal or node.var > var:
                    row[var] = coins[var] < 0.5
                    var += 1
                    continue
                take_hi = coins[var] < self._hi_prob[node.id]
                row[var] = take_hi
                node = node.hi if take_hi else node.lo
                var += 1
        return out

    def model_probability(self, assignment):
        """Exact probability of one full assignment (0 if not a model)."""
        if not evaluate(self.root, assignment):
            return Fraction(0)
        return Fraction(1, self.total_models)

    def enumerate_models(self):
        """Yield every model as a (n_vars,) uint8 array; order is deterministic."""
        n = self.n_vars
        row = np.zeros(n, dtype=np.uint8)

        def emit_free(var, upto, node):
            # Enumerate the unconstrained variables in [var, upto).
            if var == upto:
                yield from descend(node)
                return
            for bit in (0, 1):
                row[var] = bit
                yield from emit_free(var + 1, upto, node)

        def descend(node):
            if node is self.manager.true:
                yield row.copy()
                return
            for bit, child in ((0, node.lo), (1, node.hi)):
                if child is self.manager.false:
                    # Skip before expanding free levels: a false child sits at
                    # the terminal level, so expanding first would walk every
                    # assignment of the remaining variables for nothing.
                    continue
                row[node.var] = bit
                yield from emit_free(node.var + 1, child.var, child)

        if self.root is self.manager.false:
            return
        yield from emit_free(0, self.root.var, self.root)


# -- integer encodings ------------------------------------------------------------

class BitEncoding:
    """Fixed-width binary layout for a vector of nonnegative integer variables.

    Bit 0 is the most significant. layout='blocked' (the default) groups each
    variable's bits together, most significant first, so conjoining a global
    sum constraint with per-variable bounds only ever tracks one variable's
    partial value at a time. 'interleaved' orders the bits bit-major; it is
    kept selectable but its conjunctions grow multiplicatively with the number
    of per-variable constraints.
    """

    def __init__(self, n_vars, bits, layout="blocked"):
        if layout not in ("interleaved", "blocked"):
            raise ValueError("layout must be 'interleaved' or 'blocked'")
        self.n_vars = int(n_vars)
        self.bits = int(bits)
        self.layout = layout

    @property
    def n_bool(self):
        return self.n_vars * self.bits

    def max_value(self):
        return (1 << self.bits) - 1

    def bool_index(self, var, bit):
        if self.layout == "interleaved":
            return bit * self.n_vars + var
        return var * self.bits + bit

    def pb_from_linear(self, int_coeffs, comparator, threshold):
        """Lift a linear constraint over the integer variables to the bits."""
        int_coeffs = np.asarray(int_coeffs, dtype=np.float64)
        if int_coeffs.size != self.n_vars:
            raise ValueError("one coefficient per integer variable required")
        coeffs = np.zeros(self.n_bool)
        for var in range(self.n_vars):
            for bit in range(self.bits):
                weight = float(1 << (self.bits - 1 - bit))
                coeffs[self.bool_index(var, bit)] = int_coeffs[var] * weight
        return PbConstraint(tuple(coeffs), comparator, float(threshold))

    def bound_constraint(self, var, upper):
        """value_var <= upper as a PB constraint over that variable's bits."""
        if upper > self.max_value():
            raise ValueError(f"{self.bits}-bit encoding cannot reach bound {upper}")
        coeffs = np.zeros(self.n_bool)
        for bit in range(self.bits):
            coeffs[self.bool_index(var, bit)] = float(1 << (self.bits - 1 - bit))
        return PbConstraint(tuple(coeffs), "le", float(upper))

    def decode(self, bits_matrix):
        """(rows, n_bool) bits -> (rows, n_vars) float64 integer values."""
        bits_matrix = np.asarray(bits_matrix)
        single = bits_matrix.ndim == 1
        if single:
            bits_matrix = bits_matrix[None, :]
        values = np.zeros((bits_matrix.shape[0], self.n_vars))
        for var in range(self.n_vars):
            for bit in range(self.bits):
                weight = float(1 << (self.bits - 1 - bit))
                values[:, var] += weight * bits_matrix[:, self.bool_index(var, bit)]
        return values[0] if single else values


def compile_allocation(total, cap, n_vars, bits=6, layout="blocked",
                       node_budget=2_000_000):
    """Diagram for sum a_i = total, 0 <= a_i <= cap over bit-encoded integers."""
    enc = BitEncoding(n_vars, bits, layout)
    manager = DiagramManager(enc.n_bool, node_budget=node_budget)
    parts = [manager.compile_pb(enc.pb_from_linear(np.ones(n_vars), "eq", total))]
    parts.extend(manager.compile_pb(enc.bound_constraint(v, cap)) for v in range(n_vars))
    root = manager.conjoin_all(parts)
    return enc, manager, root


def sample_actions(psdd, encoding, count, seed=0):
    """Draw `count` integer action vectors uniformly from the diagram's models."""
    bits = psdd.sample_bits(count, seed=seed)
    x = encoding.decode(bits) if count else np.zeros((0, encoding.n_vars))
    return SampleDataset(x=x.reshape(count, encoding.n_vars), y=np.zeros((count, 0)),
                         source="psdd", feasible_fraction=1.0)


def all_actions(psdd, encoding):
    """Every valid integer action vector, enumerated from the diagram."""
    rows = [encoding.decode(bits) for bits in psdd.enumerate_models()]
    x = np.stack(rows) if rows else np.zeros((0, encoding.n_vars))
    return SampleDataset(x=x, y=np.zeros((len(rows), 0)), source="psdd",
                         feasible_fraction=1.0)


# -- diagram files ---------------------------------------------------------------

def diagram_to_json(manager, root):
    """Serializable node list (id, var, lo, hi) reachable from the root."""
    manager._require_owned(root)
    nodes = []
    seen = set()
    stack = [root]
    while stack:
        node = stack.pop()
        if node.is_terminal or node.id in seen:
            continue
        seen.add(node.id)
        nodes.append({"id": node.id, "var": node.var, "lo": node.lo.id, "hi": node.hi.id})
        stack.extend((node.lo, node.hi))
    nodes.sort(key=lambda entry: entry["id"])
    return {"n_vars": manager.n_vars, "root": root.id, "nodes": nodes,
            "true": 1, "false": 0}


def diagram_from_json(payload):
    """Rebuild (manager, root) from diagram_to_json output; ids are remapped."""
    manager = DiagramManager(payload["n_vars"])
    by_id = {0: manager.false, 1: manager.true}
    for entry in sorted(payload["nodes"], key=lambda e: e["var"], reverse=True):
        by_id[entry["id"]] = manager.node(entry["var"], by_id[entry["lo"]], by_id[entry["hi"]])
    return manager, by_id[payload["root"]]
