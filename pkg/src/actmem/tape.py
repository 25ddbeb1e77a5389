"""Record-and-replay reverse-mode differentiation with lazy stashes.

Operators append :class:`TapeNode` objects in execution order. Each node holds
the stashes its backward rule needs. A stash is either materialized (a tensor
or mask kept alive and charged to the ledger) or recomputable from a recipe
over other live stashes, which is how an output can be dropped in the forward
pass and rebuilt just-in-time during backward.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, LifecycleError, ShapeError, TapeStateError
from .tensor import Role, StashLedger, Tensor, sum_to_shape

BackwardRule = Callable[[np.ndarray, list, dict], tuple]
RecomputeRule = Callable[[list, dict], Tensor]

BACKWARD_RULES: dict = {}
RECOMPUTE_RULES: dict = {}


def register_backward(rule_id: str):
    def deco(fn: BackwardRule) -> BackwardRule:
        BACKWARD_RULES[rule_id] = fn
        return fn
    return deco


def register_recompute(rule_id: str):
    def deco(fn: RecomputeRule) -> RecomputeRule:
        RECOMPUTE_RULES[rule_id] = fn
        return fn
    return deco


@dataclass(frozen=True)
class Recipe:
    rule: str
    sources: tuple
    params: dict = field(default_factory=dict)


class LazyStash:
    """A retained-or-recomputable reference to an activation."""

    def __init__(self, value=None, recipe: Optional[Recipe] = None,
                 role: Role = Role.OP_OWN, tag: Optional[str] = None):
        if (value is None) == (recipe is None):
            raise ValueError("a stash holds exactly one of value or recipe")
        self._value = value
        self.recipe = recipe
        self.role = Role(role)
        self.tag = tag if tag is not None else getattr(value, "tag", None)
        self.alive = True
        self.refs = 0

    @classmethod
    def materialized(cls, value, role: Role = Role.OP_OWN, tag: Optional[str] = None) -> "LazyStash":
        return cls(value=value, role=role, tag=tag)

    @classmethod
    def recomputable(cls, rule: str, sources: Sequence["LazyStash"], params: Optional[dict] = None,
                     role: Role = Role.SHARED, tag: Optional[str] = None) -> "LazyStash":
        return cls(recipe=Recipe(rule, tuple(sources), dict(params or {})), role=role, tag=tag)

    @property
    def is_materialized(self) -> bool:
        return self.recipe is None

    def materialize(self):
        if not self.alive:
            raise LifecycleError(f"stash {self.tag!r} was already released")
        if self.is_materialized:
            return self._value
        for src in self.recipe.sources:
            if not src.alive:
                raise LifecycleError(
                    f"cannot recompute {self.tag!r}: input {src.tag!r} was freed")
        try:
            rule = RECOMPUTE_RULES[self.recipe.rule]
        except KeyError:
            raise ConfigurationError(f"no recompute rule {self.recipe.rule!r}") from None
        out = rule([s.materialize() for s in self.recipe.sources], self.recipe.params)
        out.tag = self.tag
        return out

    def __repr__(self):
        kind = "materialized" if self.is_materialized else f"recomputable:{self.recipe.rule}"
        return f"LazyStash({kind}, tag={self.tag!r}, role={self.role.value})"


def materialize(stash: LazyStash):
    return stash.materialize()


class Var:
    """Handle to a value on a tape (a leaf or a node output)."""

    __slots__ = ("tape", "value", "node", "requires_grad", "__weakref__")

    def __init__(self, tape: "Tape", value: Tensor, node=None, requires_grad: bool = True):
        self.tape = tape
        self.value = value
        self.node = node
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    @property
    def name(self):
        return self.value.tag

    def __repr__(self):
        return f"Var({self.name!r}, shape={self.shape})"


@dataclass(eq=False)
class TapeNode:
    op: str
    inputs: tuple
    stashes: list
    rule: str
    attrs: dict
    output: Optional[Var] = None

    @property
    def output_shape(self):
        return self.output.shape


class Tape:
    """Execution-order record of operators for a single backward pass."""

    def __init__(self, ledger: Optional[StashLedger] = None):
        self.ledger = ledger if ledger is not None else StashLedger()
        self.nodes: list = []
        self.leaves: list = []
        self._stash_of: dict = {}
        self._backward_started = False
        self._pinned: list = []
        self.step_samples: list = []

    # -- construction -----------------------------------------------------

    def leaf(self, value, requires_grad: bool = True, name: Optional[str] = None) -> Var:
        if not isinstance(value, Tensor):
            value = Tensor(value)
        if name is not None:
            value.tag = name
        v = Var(self, value, None, requires_grad)
        self.leaves.append(v)
        return v

    def _check_open(self):
        if self._backward_started:
            raise TapeStateError("cannot record after backward has begun")

    def _check_input(self, v):
        if not isinstance(v, Var) or v.tape is not self:
            raise ConfigurationError(f"input {v!r} is not on this tape")

    def record(self, op: str, inputs: Sequence[Var], output: Tensor, stashes: Sequence[LazyStash],
               backward: str, attrs: Optional[dict] = None, name: Optional[str] = None,
               output_stash: Optional[LazyStash] = None) -> Var:
        """Append a node and charge its stashes to the ledger.

        ``output_stash`` registers how downstream consumers should retain the
        output (e.g. a recomputable recipe instead of the tensor itself).
        """
        self._check_open()
        for v in inputs:
            self._check_input(v)
        if name is not None:
            output.tag = name
        node = TapeNode(op, tuple(inputs), list(stashes), backward, dict(attrs or {}))
        out = Var(self, output, node, any(v.requires_grad for v in inputs))
        node.output = out
        for s in node.stashes:
            self._attach(s)
        if output_stash is not None:
            self._stash_of[id(output)] = output_stash
        self.nodes.append(node)
        self.ledger.sample()
        return out

    def _attach(self, stash: LazyStash):
        if stash.refs == 0:
            if stash.is_materialized:
                self.ledger.record(stash.tag, stash.role, stash._value)
            else:
                for src in stash.recipe.sources:
                    self._attach(src)
        stash.refs += 1

    def _detach(self, stash: LazyStash):
        stash.refs -= 1
        if stash.refs > 0:
            return
        stash.alive = False
        if stash.is_materialized:
            self.ledger.release(stash._value)
            stash._value = None
        else:
            for src in stash.recipe.sources:
                self._detach(src)

    def stash(self, v: Var, role: Role = Role.SHARED) -> LazyStash:
        """The stash downstream consumers should hold for ``v``'s value."""
        s = self._stash_of.get(id(v.value))
        if s is None:
            s = LazyStash.materialized(v.value, role=role)
            self._stash_of[id(v.value)] = s
        return s

    def retained(self, v: Var) -> Optional[LazyStash]:
        """The live stash already holding ``v``'s value, if any."""
        s = self._stash_of.get(id(v.value))
        if s is not None and s.refs > 0 and s.is_materialized:
            return s
        return None

    def retain(self, v: Var, role: Role = Role.SHARED) -> LazyStash:
        """Keep ``v`` alive past the forward pass as if a later consumer held it."""
        self._check_open()
        s = self.stash(v, role)
        self._attach(s)
        self._pinned.append(s)
        return s

    # -- backward ---------------------------------------------------------

    def backward(self, output: Var, seed: Optional[Tensor] = None) -> dict:
        """Reverse sweep from ``output``; returns ``{leaf Var: Tensor}``."""
        if self._backward_started:
            raise TapeStateError("backward may run only once per tape")
        self._check_input(output)
        seed_arr = (np.ones(output.shape, dtype=output.value.dtype) if seed is None
                    else (seed.data if isinstance(seed, Tensor) else np.asarray(seed)))
        if tuple(seed_arr.shape) != tuple(output.shape):
            raise ShapeError(f"seed shape {seed_arr.shape} != output shape {output.shape}")
        for node in self.nodes:
            if node.rule not in BACKWARD_RULES:
                raise ConfigurationError(f"no backward rule registered for {node.rule!r}")
        self._backward_started = True

        grads: dict = {id(output): seed_arr}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is not None:
                values, transient = [], 0
                for s in node.stashes:
                    val = s.materialize()
                    if not s.is_materialized:
                        transient += val.nbytes
                    values.append(val)
                self.ledger.add_transient(transient)
                in_grads = BACKWARD_RULES[node.rule](g, values, node.attrs)
                if len(in_grads) != len(node.inputs):
                    raise ConfigurationError(
                        f"rule {node.rule!r} returned {len(in_grads)} grads for "
                        f"{len(node.inputs)} inputs")
                for inp, gi in zip(node.inputs, in_grads):
                    if gi is None or not inp.requires_grad:
                        continue
                    if gi.shape != inp.shape:
                        raise ShapeError(
                            f"rule {node.rule!r} produced grad {gi.shape} for input {inp.shape}")
                    prev = grads.get(id(inp))
                    grads[id(inp)] = gi if prev is None else prev + gi
                del values
                self.ledger.drop_transient(transient)
            for s in node.stashes:
                self._detach(s)
            self.step_samples.append(self.ledger.sample())

        out = {}
        for leaf in self.leaves:
            if leaf.requires_grad:
                g = grads.get(id(leaf))
                if g is None:
                    g = np.zeros(leaf.shape, dtype=leaf.value.dtype)
                out[leaf] = Tensor.wrap(np.asarray(g, dtype=leaf.value.dtype))
        return out

    @property
    def peak_stash_bytes(self) -> int:
        return self.ledger.peak_bytes


# -- generic tape operators --------------------------------------------------


def _t(arr, dtype=None) -> Tensor:
    arr = np.asarray(arr)
    if dtype is not None and arr.dtype != dtype:
        arr = arr.astype(dtype)
    return Tensor.wrap(arr)


@register_backward("scale")
def _scale_backward(g, stashes, attrs):
    return (g * attrs["factor"],)


def scale(tape: Tape, x: Var, factor: float, name: Optional[str] = None) -> Var:
    out = _t(x.value.data * x.value.dtype.type(factor))
    return tape.record("scale", [x], out, [], "scale", {"factor": x.value.dtype.type(factor)}, name)


@register_backward("add")
def _add_backward(g, stashes, attrs):
    return (sum_to_shape(g, attrs["shapes"][0]), sum_to_shape(g, attrs["shapes"][1]))


def add(tape: Tape, a: Var, b: Var, name: Optional[str] = None) -> Var:
    try:
        out = np.add(a.value.data, b.value.data)
    except ValueError as exc:
        raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}") from exc
    if out.shape != a.shape and out.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}")
    return tape.record("add", [a, b], _t(out), [], "add", {"shapes": (a.shape, b.shape)}, name)
