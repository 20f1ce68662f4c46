"""Joint layout and multi-scale hyperedges of the 17-joint skeleton.

Index  Joint            Parent   Body edge  Part edge
-----  ---------------  -------  ---------  ---------
0      hip (root)       -        b1         p1
1      spine            0        b1         p1
2      thorax           1        b1         p1
3      neck             2        b1         p1
4      head             3        b1         p2
5      right_hip        0        b2         p3
6      right_knee       5        b2         p3
7      right_foot       6        b2         p4
8      left_hip         0        b3         p5
9      left_knee        8        b3         p5
10     left_foot        9        b3         p6
11     right_shoulder   2        b4         p7
12     right_elbow      11       b4         p7
13     right_wrist      12       b4         p8
14     left_shoulder    2        b5         p9
15     left_elbow       14       b5         p9
16     left_wrist       15       b5         p0
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


class SkeletonError(ValueError):
    pass


@dataclass(frozen=True)
class SkeletonSpec:
    joint_names: tuple[str, ...]
    parents: tuple[int, ...]
    body_edges: tuple[tuple[int, ...], ...]
    part_edges: tuple[tuple[int, ...], ...]
    flip_pairs: tuple[tuple[int, int], ...]
    root: int = 0
    name: str = field(default="custom")

    def __post_init__(self):
        J = len(self.joint_names)
        if len(self.parents) != J:
            raise SkeletonError(f"{len(self.parents)} parents for {J} joints")
        for scale, edges in (("body", self.body_edges), ("part", self.part_edges)):
            covered = sorted(j for e in edges for j in e)
            if not edges or any(len(e) == 0 for e in edges):
                raise SkeletonError(f"{scale}-scale hypergraph has an empty hyperedge")
            if set(covered) != set(range(J)):
                missing = sorted(set(range(J)) - set(covered))
                raise SkeletonError(f"{scale}-scale hyperedges do not cover joints {missing}")
        for i, p in enumerate(self.part_edges):
            owners = [b for b, e in enumerate(self.body_edges) if set(p) <= set(e)]
            if len(owners) != 1:
                raise SkeletonError(f"part hyperedge {i} {p} is not contained in exactly one body hyperedge")
        seen = [j for pair in self.flip_pairs for j in pair]
        if len(seen) != len(set(seen)) or any(not 0 <= j < J for j in seen):
            raise SkeletonError("flip pairs must be disjoint valid joint indices")

    @property
    def num_joints(self) -> int:
        return len(self.joint_names)

    def index(self, name: str) -> int:
        return self.joint_names.index(name)

    def incidence(self, scale: str) -> np.ndarray:
        """0/1 incidence matrix of shape ``(J, E)`` for ``scale`` in {body, part}."""
        edges = {"body": self.body_edges, "part": self.part_edges}[scale]
        H = np.zeros((self.num_joints, len(edges)))
        for e, members in enumerate(edges):
            H[list(members), e] = 1.0
        return H

    def flip_permutation(self) -> np.ndarray:
        perm = np.arange(self.num_joints)
        for a, b in self.flip_pairs:
            perm[a], perm[b] = b, a
        return perm

    def bones(self) -> list[tuple[int, int]]:
        return [(p, j) for j, p in enumerate(self.parents) if p >= 0]

    def to_json(self) -> str:
        return json.dumps({
            "name": self.name,
            "joints": [{"index": i, "name": n, "parent": p}
                       for i, (n, p) in enumerate(zip(self.joint_names, self.parents))],
            "root": self.root,
            "body_edges": [list(e) for e in self.body_edges],
            "part_edges": [list(e) for e in self.part_edges],
            "flip_pairs": [list(p) for p in self.flip_pairs],
        }, indent=2)

    @classmethod
    def from_json(cls, text: str | dict) -> "SkeletonSpec":
        d = json.loads(text) if isinstance(text, str) else text
        joints = sorted(d["joints"], key=lambda j: j["index"])
        return cls(
            joint_names=tuple(j["name"] for j in joints),
            parents=tuple(j["parent"] for j in joints),
            body_edges=tuple(tuple(e) for e in d["body_edges"]),
            part_edges=tuple(tuple(e) for e in d["part_edges"]),
            flip_pairs=tuple(tuple(p) for p in d["flip_pairs"]),
            root=d.get("root", 0),
            name=d.get("name", "custom"),
        )


def h36m_skeleton() -> SkeletonSpec:
    names = (
        "hip", "spine", "thorax", "neck", "head",
        "right_hip", "right_knee", "right_foot",
        "left_hip", "left_knee", "left_foot",
        "right_shoulder", "right_elbow", "right_wrist",
        "left_shoulder", "left_elbow", "left_wrist",
    )
    parents = (-1, 0, 1, 2, 3, 0, 5, 6, 0, 8, 9, 2, 11, 12, 2, 14, 15)
    body = ((0, 1, 2, 3, 4), (5, 6, 7), (8, 9, 10), (11, 12, 13), (14, 15, 16))
    part = ((0, 1, 2, 3), (4,), (5, 6), (7,), (8, 9), (10,), (11, 12), (13,), (14, 15), (16,))
    spec = SkeletonSpec(names, parents, body, part,
                        flip_pairs=((5, 8), (6, 9), (7, 10), (11, 14), (12, 15), (13, 16)),
                        root=0, name="h36m17")
    if len(spec.body_edges) != 5 or len(spec.part_edges) != 10:
        raise SkeletonError("17-joint layout must have 5 body and 10 part hyperedges")
    return spec


H36M = h36m_skeleton()
