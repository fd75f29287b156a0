"""Skeleton trees and the "stickman drawing" scan plan.

The scan walks the tree depth-first from the root, re-entering a parent after
every finished child subtree (including the final return to the root).  The
resulting tour has ``2V - 1`` entries; each joint appears ``children + 1``
times and only its last appearance is read back (joint select).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    CycleDetected,
    Disconnected,
    DuplicateEdge,
    IndexOutOfRange,
    InvalidSkeleton,
    SelfLoop,
    ShapeMismatch,
)


@dataclass(frozen=True)
class Skeleton:
    joint_count: int
    parent: tuple[int | None, ...]
    root: int
    joint_names: tuple[str, ...] | None = None
    children: tuple[tuple[int, ...], ...] = field(init=False, repr=False)

    def __post_init__(self):
        V = self.joint_count
        if V < 1 or len(self.parent) != V:
            raise InvalidSkeleton("parent array must have one entry per joint")
        if not 0 <= self.root < V or self.parent[self.root] is not None:
            raise InvalidSkeleton("root must be a joint with no parent")
        kids: list[list[int]] = [[] for _ in range(V)]
        for v, p in enumerate(self.parent):
            if v == self.root:
                continue
            if p is None:
                raise InvalidSkeleton(f"joint {v} has no parent but is not the root")
            if not 0 <= p < V:
                raise IndexOutOfRange(f"parent of joint {v} out of range")
            kids[p].append(v)
        # every joint must reach the root without revisiting
        for v in range(V):
            seen, cur = set(), v
            while cur != self.root:
                if cur in seen:
                    raise CycleDetected(f"parent chain from joint {v} loops")
                seen.add(cur)
                cur = self.parent[cur]
        object.__setattr__(self, "children", tuple(tuple(sorted(k)) for k in kids))

    @property
    def V(self) -> int:
        return self.joint_count

    def edges(self) -> list[tuple[int, int]]:
        return [(p, v) for v, p in enumerate(self.parent) if p is not None]

    def adjacency(self) -> np.ndarray:
        A = np.zeros((self.V, self.V), dtype=np.int8)
        for a, b in self.edges():
            A[a, b] = A[b, a] = 1
        return A


def build_skeleton(
    edges, root: int, V: int, joint_names: list[str] | None = None
) -> Skeleton:
    """Validate an undirected edge list as a tree and orient it away from ``root``."""
    if V < 1:
        raise InvalidSkeleton("V must be positive")
    if not 0 <= root < V:
        raise IndexOutOfRange(f"root {root} outside [0, {V})")
    adj: list[set[int]] = [set() for _ in range(V)]
    for a, b in edges:
        a, b = int(a), int(b)
        if not (0 <= a < V and 0 <= b < V):
            raise IndexOutOfRange(f"edge ({a}, {b}) references a joint outside [0, {V})")
        if a == b:
            raise SelfLoop(f"self loop at joint {a}")
        if b in adj[a]:
            raise DuplicateEdge(f"edge ({a}, {b}) given twice")
        adj[a].add(b)
        adj[b].add(a)
    parent: list[int | None] = [None] * V
    visited = [False] * V
    visited[root] = True
    stack = [root]
    while stack:
        u = stack.pop()
        for w in sorted(adj[u]):
            if w == parent[u]:
                continue
            if visited[w]:
                raise CycleDetected(f"edge ({u}, {w}) closes a cycle")
            visited[w] = True
            parent[w] = u
            stack.append(w)
    if not all(visited):
        missing = [v for v in range(V) if not visited[v]]
        raise Disconnected(f"joints {missing} are not reachable from root {root}")
    names = tuple(joint_names) if joint_names is not None else None
    return Skeleton(V, tuple(parent), root, names)


@dataclass(frozen=True)
class ScanPlan:
    tour: np.ndarray
    repeat_count: np.ndarray
    select_index: np.ndarray

    @property
    def V(self) -> int:
        return len(self.repeat_count)

    @property
    def L(self) -> int:
        return len(self.tour)


def make_scan_plan(skeleton: Skeleton) -> ScanPlan:
    tour: list[int] = []
    # iterative DFS: (joint, next child position)
    stack = [(skeleton.root, 0)]
    tour.append(skeleton.root)
    while stack:
        v, i = stack[-1]
        kids = skeleton.children[v]
        if i < len(kids):
            stack[-1] = (v, i + 1)
            stack.append((kids[i], 0))
            tour.append(kids[i])
        else:
            stack.pop()
            if stack:
                tour.append(stack[-1][0])
    tour_arr = np.array(tour, dtype=np.int64)
    repeat = np.bincount(tour_arr, minlength=skeleton.V).astype(np.int64)
    select = np.empty(skeleton.V, dtype=np.int64)
    for p, v in enumerate(tour):
        select[v] = p
    for arr in (tour_arr, repeat, select):
        arr.setflags(write=False)
    return ScanPlan(tour_arr, repeat, select)


def expand_features(features: np.ndarray, plan: ScanPlan, axis: int = 0) -> np.ndarray:
    """Joint repeat: row ``p`` of the output is ``features[tour[p]]``."""
    features = np.asarray(features)
    if features.shape[axis] != plan.V:
        raise ShapeMismatch(f"expected {plan.V} joints on axis {axis}, got {features.shape[axis]}")
    return np.take(features, plan.tour, axis=axis)


def contract_features(tour_features: np.ndarray, plan: ScanPlan, axis: int = 0) -> np.ndarray:
    """Joint select: row ``v`` of the output is ``tour_features[select_index[v]]``."""
    tour_features = np.asarray(tour_features)
    if tour_features.shape[axis] != plan.L:
        raise ShapeMismatch(f"expected {plan.L} tour rows on axis {axis}, got {tour_features.shape[axis]}")
    return np.take(tour_features, plan.select_index, axis=axis)


def parse_topology(text: str, source: str = "<string>") -> Skeleton:
    """Parse the plain-text topology format (``V``, ``root``, ``edge a b`` lines)."""
    V = root = None
    edges = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if parts[0] == "V" and len(parts) == 2:
                V = int(parts[1])
            elif parts[0] == "root" and len(parts) == 2:
                root = int(parts[1])
            elif parts[0] == "edge" and len(parts) == 3:
                edges.append((int(parts[1]), int(parts[2])))
            else:
                raise ValueError
        except ValueError:
            raise ConfigError(f"cannot parse topology line {raw.strip()!r}", source, lineno) from None
    if V is None or root is None:
        raise ConfigError("topology needs both 'V' and 'root' lines", source)
    return build_skeleton(edges, root, V)


def format_topology(skeleton: Skeleton) -> str:
    lines = [f"V {skeleton.V}", f"root {skeleton.root}"]
    lines += [f"edge {a} {b}" for a, b in skeleton.edges()]
    return "\n".join(lines) + "\n"


def load_topology(path: str | Path) -> Skeleton:
    path = Path(path)
    return parse_topology(path.read_text(), str(path))


def canonical_skeleton() -> Skeleton:
    """The shipped 17-joint topology, rooted at the head joint."""
    text = resources.files("motiondiff.resources").joinpath("h36m17.skel").read_text()
    names = [
        "hip", "r_hip", "r_knee", "r_foot", "l_hip", "l_knee", "l_foot", "spine", "thorax",
        "neck", "head", "l_shoulder", "l_elbow", "l_wrist", "r_shoulder", "r_elbow", "r_wrist",
    ]
    sk = parse_topology(text, "h36m17.skel")
    return Skeleton(sk.V, sk.parent, sk.root, tuple(names))
