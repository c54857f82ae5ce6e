"""Line-oriented text formats for MDPs, policies and datasets.

Numbers are written with 17 significant digits so a write/read cycle is
bit-exact.  Steps, states and actions are 1-based for steps and 0-based for
states and actions, matching the Python API.

MDP layout::

    mdp H d S A
    initial x
    names n_0 ... n_{S-1}          (optional)
    features                        then H*S*A rows: h x a phi_1 .. phi_d
    transitions                     then H*S*A rows: h x a p_0 .. p_{S-1}
    rewards                         then H rows:     h theta_1 .. theta_d
    reward_table                    (optional) H*S*A rows: h x a r
    active                          (optional) H rows: h m_0 .. m_{S-1}
    end
"""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .mdp_core import FeatureMDP
from .offline_data import OfflineDataset
from .policies import PerturbedLinear, Policy, Softmax, Tabular


class ParseError(ValueError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = str(path)
        self.line = line


def fmt(x: float) -> str:
    return format(float(x), ".17g")


def _row(*parts) -> str:
    return " ".join(p if isinstance(p, str) else fmt(p) if isinstance(p, float) else str(p)
                    for p in parts)


# ---------------------------------------------------------------------------
# MDP

def dumps_mdp(mdp: FeatureMDP) -> str:
    H, S, A, d = mdp.features.shape
    out = [_row("mdp", H, d, S, A), _row("initial", mdp.initial_state)]
    if mdp.state_names is not None:
        if any(not n or len(n.split()) != 1 for n in mdp.state_names):
            raise ValueError("state names must be nonempty and free of whitespace")
        out.append(" ".join(["names", *mdp.state_names]))
    out.append("features")
    for h in range(H):
        for x in range(S):
            for a in range(A):
                out.append(_row(h + 1, x, a, *map(float, mdp.features[h, x, a])))
    out.append("transitions")
    for h in range(H):
        for x in range(S):
            for a in range(A):
                out.append(_row(h + 1, x, a, *map(float, mdp.transitions[h, x, a])))
    out.append("rewards")
    for h in range(H):
        out.append(_row(h + 1, *map(float, mdp.reward_coeffs[h])))
    if mdp.reward_table is not None:
        out.append("reward_table")
        for h in range(H):
            for x in range(S):
                for a in range(A):
                    out.append(_row(h + 1, x, a, float(mdp.reward_table[h, x, a])))
    if not mdp.active.all():
        out.append("active")
        for h in range(H):
            out.append(_row(h + 1, *map(int, mdp.active[h])))
    out.append("end")
    return "\n".join(out) + "\n"


class _Lines:
    """Cursor over non-blank, non-comment lines that remembers line numbers."""

    def __init__(self, text: str, path):
        self.path = path
        self.items = [(i + 1, ln.split()) for i, ln in enumerate(text.splitlines())
                      if ln.strip() and not ln.lstrip().startswith("#")]
        self.pos = 0

    def error(self, message: str, line: int | None = None) -> ParseError:
        if line is None:
            line = self.items[self.pos][0] if self.pos < len(self.items) else (
                self.items[-1][0] if self.items else 1)
        return ParseError(self.path, line, message)

    def peek(self) -> list[str] | None:
        return self.items[self.pos][1] if self.pos < len(self.items) else None

    def next(self, what: str) -> tuple[int, list[str]]:
        if self.pos >= len(self.items):
            raise self.error(f"unexpected end of input, expected {what}")
        item = self.items[self.pos]
        self.pos += 1
        return item

    def keyword(self, word: str) -> None:
        line, toks = self.next(f"'{word}'")
        if toks != [word]:
            raise ParseError(self.path, line, f"expected '{word}', got {' '.join(toks)!r}")


def _ints(path, line: int, toks: list[str]) -> list[int]:
    try:
        return [int(t) for t in toks]
    except ValueError:
        raise ParseError(path, line, f"expected integers, got {' '.join(toks)!r}") from None


def _floats(path, line: int, toks: list[str]) -> list[float]:
    try:
        return [float(t) for t in toks]
    except ValueError:
        raise ParseError(path, line, f"expected numbers, got {' '.join(toks)!r}") from None


def _indexed_block(cur: _Lines, shape: tuple[int, ...], width: int, what: str) -> np.ndarray:
    """Rows ``h x a v...`` (or ``h v...`` when ``shape`` has one axis) filling every cell once."""
    out = np.full(shape + (width,), np.nan)
    seen = np.zeros(shape, dtype=bool)
    nidx = len(shape)
    for _ in range(int(np.prod(shape))):
        line, toks = cur.next(f"a {what} row")
        if len(toks) != nidx + width:
            raise ParseError(cur.path, line, f"{what} row needs {nidx + width} fields, got {len(toks)}")
        idx = _ints(cur.path, line, toks[:nidx])
        idx[0] -= 1
        if not all(0 <= i < n for i, n in zip(idx, shape)):
            raise ParseError(cur.path, line, f"{what} index {toks[:nidx]} out of range")
        if seen[tuple(idx)]:
            raise ParseError(cur.path, line, f"duplicate {what} row {toks[:nidx]}")
        seen[tuple(idx)] = True
        out[tuple(idx)] = _floats(cur.path, line, toks[nidx:])
    return out


def loads_mdp(text: str, path="<string>") -> FeatureMDP:
    cur = _Lines(text, path)
    line, head = cur.next("header")
    if len(head) != 5 or head[0] != "mdp":
        raise ParseError(path, line, "header must be 'mdp H d S A'")
    H, d, S, A = _ints(path, line, head[1:])
    if min(H, d, S, A) < 1:
        raise ParseError(path, line, "H, d, S and A must be positive")
    line, toks = cur.next("'initial x'")
    if len(toks) != 2 or toks[0] != "initial":
        raise ParseError(path, line, "expected 'initial x'")
    initial = _ints(path, line, toks[1:])[0]
    names = None
    if cur.peek() and cur.peek()[0] == "names":
        line, toks = cur.next("names")
        if len(toks) != S + 1:
            raise ParseError(path, line, f"names needs {S} entries")
        names = tuple(toks[1:])
    cur.keyword("features")
    feats = _indexed_block(cur, (H, S, A), d, "feature")
    cur.keyword("transitions")
    trans = _indexed_block(cur, (H, S, A), S, "transition")
    cur.keyword("rewards")
    theta = _indexed_block(cur, (H,), d, "reward")
    table = None
    active = None
    if cur.peek() == ["reward_table"]:
        cur.next("reward_table")
        table = _indexed_block(cur, (H, S, A), 1, "reward table")[..., 0]
    if cur.peek() == ["active"]:
        cur.next("active")
        active = _indexed_block(cur, (H,), S, "active") != 0
    cur.keyword("end")
    if cur.peek() is not None:
        raise cur.error("trailing content after 'end'")
    try:
        return FeatureMDP(feats, trans, theta, initial, table, active, names)
    except ValueError as err:
        raise ParseError(path, line, str(err)) from err


def write_mdp(mdp: FeatureMDP, path) -> None:
    Path(path).write_text(dumps_mdp(mdp), encoding="utf-8")


def read_mdp(path) -> FeatureMDP:
    return loads_mdp(Path(path).read_text(encoding="utf-8"), path)


# ---------------------------------------------------------------------------
# policies
#
#   policy perturbed H d     then H rows: h sigma w_1 .. w_d
#   policy softmax H d       then H rows: h eta w_1 .. w_d
#   policy tabular H S A     then H*S rows: h x p_0 .. p_{A-1}
#   end

def dumps_policy(policy: Policy) -> str:
    rules = policy.steps
    kind = type(rules[0])
    if any(type(r) is not kind for r in rules):
        raise ValueError("only policies with one rule type across steps can be written")
    H = len(rules)
    if kind is Tabular:
        S, A = rules[0].probs.shape
        out = [_row("policy", "tabular", H, S, A)]
        for h, r in enumerate(rules):
            for x in range(S):
                out.append(_row(h + 1, x, *map(float, r.probs[x])))
    else:
        d = len(rules[0].w)
        name, scale = ("perturbed", "sigma") if kind is PerturbedLinear else ("softmax", "eta")
        out = [_row("policy", name, H, d)]
        for h, r in enumerate(rules):
            out.append(_row(h + 1, float(getattr(r, scale)), *map(float, r.w)))
    out.append("end")
    return "\n".join(out) + "\n"


def loads_policy(text: str, path="<string>") -> Policy:
    cur = _Lines(text, path)
    line, head = cur.next("header")
    if len(head) < 2 or head[0] != "policy":
        raise ParseError(path, line, "header must start with 'policy'")
    kind = head[1]
    if kind == "tabular":
        if len(head) != 5:
            raise ParseError(path, line, "header must be 'policy tabular H S A'")
        H, S, A = _ints(path, line, head[2:])
        probs = _indexed_block(cur, (H, S), A, "policy")
        make = lambda: Policy.tabular(probs)  # noqa: E731
    elif kind in ("perturbed", "softmax"):
        if len(head) != 4:
            raise ParseError(path, line, f"header must be 'policy {kind} H d'")
        H, d = _ints(path, line, head[2:])
        rows = _indexed_block(cur, (H,), d + 1, "policy")
        rule = PerturbedLinear if kind == "perturbed" else Softmax
        make = lambda: Policy(tuple(rule(r[1:], float(r[0])) for r in rows))  # noqa: E731
    else:
        raise ParseError(path, line, f"unknown policy kind {kind!r}")
    cur.keyword("end")
    try:
        return make()
    except ValueError as err:
        raise ParseError(path, line, str(err)) from err


def write_policy(policy: Policy, path) -> None:
    Path(path).write_text(dumps_policy(policy), encoding="utf-8")


def read_policy(path) -> Policy:
    return loads_policy(Path(path).read_text(encoding="utf-8"), path)


# ---------------------------------------------------------------------------
# datasets: CSV with columns h,x,a,r,x_next

DATASET_COLUMNS = ["h", "x", "a", "r", "x_next"]


def write_dataset(dataset: OfflineDataset, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        out.writerow(DATASET_COLUMNS)
        for row in zip(dataset.steps, dataset.states, dataset.actions, dataset.rewards,
                       dataset.next_states):
            out.writerow([int(row[0]), int(row[1]), int(row[2]), fmt(row[3]), int(row[4])])


def read_dataset(path) -> OfflineDataset:
    cols: list[list] = [[], [], [], [], []]
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != DATASET_COLUMNS:
            raise ParseError(path, 1, f"dataset header must be {','.join(DATASET_COLUMNS)}")
        for row in reader:
            line = reader.line_num
            if len(row) != 5:
                raise ParseError(path, line, f"expected 5 fields, got {len(row)}")
            ints = _ints(path, line, [row[0], row[1], row[2], row[4]])
            cols[0].append(ints[0])
            cols[1].append(ints[1])
            cols[2].append(ints[2])
            cols[3].append(_floats(path, line, [row[3]])[0])
            cols[4].append(ints[3])
    return OfflineDataset(*cols)


__all__ = [
    "ParseError", "fmt", "dumps_mdp", "loads_mdp", "write_mdp", "read_mdp", "dumps_policy",
    "loads_policy", "write_policy", "read_policy", "write_dataset", "read_dataset",
]
