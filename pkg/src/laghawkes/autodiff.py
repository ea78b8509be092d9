"""Scalar reverse-mode differentiation on an append-only tape.

Graphs are built once and re-evaluated: inputs are named leaves whose values
are bound at :func:`forward` time.

    tape = Tape()
    x = tape.input("x")
    tape.output("y", (2.0 * x).exp())
    forward(tape, {"x": 0.0})      # {"y": 1.0}
    backward(tape, "y")            # {"x": 2.0}
"""

from __future__ import annotations

import math

from .core import InvalidArgument, NumericError

CONST, INPUT, ADD, MUL, DIV, NEG, EXP, LOG, SIN, COS, SOFTPLUS, POWER, RELU = range(13)
OP_NAMES = ("const", "input", "add", "mul", "div", "neg", "exp", "log", "sin", "cos",
            "softplus", "power", "relu")


def softplus(x: float) -> float:
    return max(x, 0.0) + math.log1p(math.exp(-abs(x)))


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


class Node:
    __slots__ = ("tape", "idx")

    def __init__(self, tape: "Tape", idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def value(self) -> float:
        return self.tape.values[self.idx]

    def _lift(self, other) -> "Node":
        if isinstance(other, Node):
            if other.tape is not self.tape:
                raise InvalidArgument("nodes belong to different tapes")
            return other
        return self.tape.const(float(other))

    def __add__(self, o):
        return self.tape._push(ADD, self.idx, self._lift(o).idx)

    __radd__ = __add__

    def __sub__(self, o):
        return self + (-self._lift(o))

    def __rsub__(self, o):
        return self._lift(o) + (-self)

    def __mul__(self, o):
        return self.tape._push(MUL, self.idx, self._lift(o).idx)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return self.tape._push(DIV, self.idx, self._lift(o).idx)

    def __rtruediv__(self, o):
        return self.tape._push(DIV, self._lift(o).idx, self.idx)

    def __neg__(self):
        return self.tape._push(NEG, self.idx)

    def __pow__(self, p: float):
        if isinstance(p, Node):
            raise InvalidArgument("only constant exponents are supported")
        return self.tape._push(POWER, self.idx, -1, float(p))

    def exp(self):
        return self.tape._push(EXP, self.idx)

    def log(self):
        return self.tape._push(LOG, self.idx)

    def sin(self):
        return self.tape._push(SIN, self.idx)

    def cos(self):
        return self.tape._push(COS, self.idx)

    def softplus(self):
        return self.tape._push(SOFTPLUS, self.idx)

    def relu(self):
        return self.tape._push(RELU, self.idx)

    def __repr__(self):
        return f"Node({OP_NAMES[self.tape.ops[self.idx]]}#{self.idx})"


class Tape:
    """Append-only list of scalar nodes; operand indices always point backwards."""

    def __init__(self):
        self.ops: list[int] = []
        self.lhs: list[int] = []
        self.rhs: list[int] = []
        self.consts: list[float] = []
        self.values: list[float] = []
        self.adjoints: list[float] = []
        self.inputs: dict[str, int] = {}
        self.outputs: dict[str, int] = {}
        self._evaluated = False

    def __len__(self):
        return len(self.ops)

    def _push(self, op, a=-1, b=-1, c=0.0) -> Node:
        self.ops.append(op)
        self.lhs.append(a)
        self.rhs.append(b)
        self.consts.append(c)
        self.values.append(c if op == CONST else 0.0)
        self.adjoints.append(0.0)
        self._evaluated = False
        return Node(self, len(self.ops) - 1)

    def const(self, value: float) -> Node:
        return self._push(CONST, c=float(value))

    def input(self, name: str) -> Node:
        if name in self.inputs:
            return Node(self, self.inputs[name])
        node = self._push(INPUT)
        self.inputs[name] = node.idx
        return node

    def output(self, name: str, node: Node) -> Node:
        self.outputs[name] = node.idx
        return node

    def forward(self, inputs: dict[str, float]) -> dict[str, float]:
        missing = set(self.inputs) - set(inputs)
        if missing:
            raise InvalidArgument(f"unbound inputs: {sorted(missing)}")
        vals, ops, lhs, rhs, consts = self.values, self.ops, self.lhs, self.rhs, self.consts
        for name, i in self.inputs.items():
            vals[i] = float(inputs[name])
        for i, op in enumerate(ops):
            if op <= INPUT:
                continue
            x = vals[lhs[i]]
            if op == ADD:
                vals[i] = x + vals[rhs[i]]
            elif op == MUL:
                vals[i] = x * vals[rhs[i]]
            elif op == DIV:
                y = vals[rhs[i]]
                if y == 0.0:
                    raise NumericError(f"division by zero at node {i}")
                vals[i] = x / y
            elif op == NEG:
                vals[i] = -x
            elif op == EXP:
                vals[i] = math.exp(x)
            elif op == LOG:
                if x <= 0.0:
                    raise NumericError(f"log of non-positive value {x} at node {i}")
                vals[i] = math.log(x)
            elif op == SIN:
                vals[i] = math.sin(x)
            elif op == COS:
                vals[i] = math.cos(x)
            elif op == SOFTPLUS:
                vals[i] = softplus(x)
            elif op == POWER:
                vals[i] = x ** consts[i]
            elif op == RELU:
                vals[i] = x if x > 0.0 else 0.0
        self._evaluated = True
        return {name: vals[i] for name, i in self.outputs.items()}

    def backward(self, output: str) -> dict[str, float]:
        if output not in self.outputs:
            raise InvalidArgument(f"unknown output {output!r}")
        if not self._evaluated:
            raise InvalidArgument("forward must run before backward")
        n = len(self.ops)
        adj = [0.0] * n
        vals, ops, lhs, rhs, consts = self.values, self.ops, self.lhs, self.rhs, self.consts
        adj[self.outputs[output]] = 1.0
        for i in range(self.outputs[output], -1, -1):
            g = adj[i]
            op = ops[i]
            if g == 0.0 or op <= INPUT:
                continue
            a = lhs[i]
            if op == ADD:
                adj[a] += g
                adj[rhs[i]] += g
            elif op == MUL:
                b = rhs[i]
                adj[a] += g * vals[b]
                adj[b] += g * vals[a]
            elif op == DIV:
                b = rhs[i]
                adj[a] += g / vals[b]
                adj[b] -= g * vals[i] / vals[b]
            elif op == NEG:
                adj[a] -= g
            elif op == EXP:
                adj[a] += g * vals[i]
            elif op == LOG:
                adj[a] += g / vals[a]
            elif op == SIN:
                adj[a] += g * math.cos(vals[a])
            elif op == COS:
                adj[a] -= g * math.sin(vals[a])
            elif op == SOFTPLUS:
                adj[a] += g * sigmoid(vals[a])
            elif op == POWER:
                p = consts[i]
                adj[a] += g * p * vals[a] ** (p - 1.0) if p != 0.0 else 0.0
            elif op == RELU:
                if vals[a] > 0.0:
                    adj[a] += g
        self.adjoints = adj
        return {name: adj[i] for name, i in self.inputs.items()}


def forward(tape: Tape, inputs: dict[str, float]) -> dict[str, float]:
    return tape.forward(inputs)


def backward(tape: Tape, output: str) -> dict[str, float]:
    return tape.backward(output)


__all__ = ["Tape", "Node", "forward", "backward", "softplus", "sigmoid"]
