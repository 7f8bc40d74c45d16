"""Call-graphs: which procedures each procedure may invoke.

A call-graph is a DAG over procedure identifiers with a single root. It is
the one place a user can inject prior structure; full k-ary trees encode
none. The on-disk format is one line per procedure, "name: child child ...",
root first.
"""
from __future__ import annotations

from dataclasses import dataclass, field


class CallGraphError(ValueError):
    pass


@dataclass
class CallGraph:
    names: list[str]
    children: list[list[int]]  # adjacency by procedure index; index 0 is the root
    depth: list[int] = field(default_factory=list)

    ROOT = 0

    def __post_init__(self):
        n = len(self.names)
        if n == 0:
            raise CallGraphError("empty call-graph")
        if len(self.children) != n:
            raise CallGraphError("adjacency size mismatch")
        for adj in self.children:
            for c in adj:
                if not 0 <= c < n:
                    raise CallGraphError(f"child index {c} out of range")
        self.depth = self._compute_depths()
        indeg = [0] * n
        for adj in self.children:
            for c in adj:
                indeg[c] += 1
        if indeg[self.ROOT] != 0:
            raise CallGraphError("root must have in-degree 0")
        unreachable = [self.names[i] for i, d in enumerate(self.depth) if d == 0]
        if unreachable:
            raise CallGraphError(f"unreachable procedures: {unreachable}")

    def _compute_depths(self) -> list[int]:
        # longest root-to-node path length, in frames; also rejects cycles
        n = len(self.names)
        depth = [0] * n
        state = [0] * n  # 0 unvisited, 1 on stack, 2 done

        def visit(v: int, d: int):
            if state[v] == 1:
                raise CallGraphError(f"cycle through {self.names[v]!r}")
            state[v] = 1
            depth[v] = max(depth[v], d)
            for c in self.children[v]:
                visit(c, d + 1)
            state[v] = 2

        # DFS revisits nodes reachable along multiple paths to get max depth;
        # graphs here are tiny, so the exponential worst case is irrelevant.
        def visit_all(v: int, d: int, on_path: set):
            if v in on_path:
                raise CallGraphError(f"cycle through {self.names[v]!r}")
            depth[v] = max(depth[v], d)
            on_path.add(v)
            for c in self.children[v]:
                visit_all(c, d + 1, on_path)
            on_path.remove(v)

        visit_all(self.ROOT, 1, set())
        return depth

    @property
    def n_procedures(self) -> int:
        return len(self.names)

    @property
    def max_depth(self) -> int:
        return max(self.depth)

    def is_leaf(self, h: int) -> bool:
        return not self.children[h]

    def to_text(self) -> str:
        lines = []
        for name, adj in zip(self.names, self.children):
            kids = " ".join(self.names[c] for c in adj)
            lines.append(f"{name}: {kids}".rstrip())
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "CallGraph":
        entries: list[tuple[str, list[str]]] = []
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if ":" not in line:
                raise CallGraphError(f"line {lineno}: expected 'name: children'")
            name, _, rest = line.partition(":")
            entries.append((name.strip(), rest.split()))
        if not entries:
            raise CallGraphError("no procedures defined")
        names = [name for name, _ in entries]
        if len(set(names)) != len(names):
            raise CallGraphError("duplicate procedure names")
        index = {name: i for i, name in enumerate(names)}
        children = []
        for name, kids in entries:
            try:
                children.append([index[k] for k in kids])
            except KeyError as e:
                raise CallGraphError(f"{name}: unknown child {e.args[0]!r}") from None
        return cls(names, children)

    def save(self, path):
        with open(path, "w") as f:
            f.write(self.to_text())

    @classmethod
    def load(cls, path) -> "CallGraph":
        with open(path) as f:
            return cls.from_text(f.read())


def full_tree(arity: int, depth: int) -> CallGraph:
    """Full arity-ary tree with `depth` levels; depth 1 is a lone root."""
    if depth < 1:
        raise CallGraphError("depth must be >= 1")
    names = ["root"]
    children: list[list[int]] = [[]]
    frontier = [0]
    for level in range(1, depth):
        next_frontier = []
        for parent in frontier:
            for _ in range(arity):
                idx = len(names)
                names.append(f"p{idx}")
                children.append([])
                children[parent].append(idx)
                next_frontier.append(idx)
        frontier = next_frontier
    return CallGraph(names, children)


def bubble_tree() -> CallGraph:
    """The 6-procedure partial binary tree used for the sorting task.

    Shape: root -> {p1, p2}, p1 -> {p3, p4}, p3 -> {p5}; four levels deep.
    """
    names = ["root", "p1", "p2", "p3", "p4", "p5"]
    children = [[1, 2], [3, 4], [], [5], [], []]
    return CallGraph(names, children)


BUILTIN_GRAPHS = {
    "full5x1": lambda: full_tree(5, 1),
    "full5x2": lambda: full_tree(5, 2),
    "full5x3": lambda: full_tree(5, 3),
    "bubble6": bubble_tree,
}


def resolve_graph(spec: str) -> CallGraph:
    """A builtin name (full5x1, bubble6, ...) or a path to a call-graph file."""
    if spec in BUILTIN_GRAPHS:
        return BUILTIN_GRAPHS[spec]()
    return CallGraph.load(spec)
