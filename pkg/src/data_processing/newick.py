"""
Rooted phylogenetic trees read from Newick text with Biopython.
"""

import io
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from Bio import Phylo
from Bio.Phylo.NewickIO import NewickError

from data_processing.seqio import TextInput, _as_text
from utils.errors import DataError


@dataclass
class PhyloTree:
    """
    Rooted tree stored as parent pointers in preorder (node 0 is the root).

    Attributes
    ----------
    names : list
        Node names; every leaf has one.
    parent : numpy.ndarray
        Parent index per node, -1 for the root.
    branch_lengths : numpy.ndarray
        Length of the edge above each node, in expected substitutions per
        site. The root entry is unused and kept at 0.
    """

    names: List[Optional[str]]
    parent: np.ndarray
    branch_lengths: np.ndarray
    children: List[List[int]] = field(init=False, repr=False)

    def __post_init__(self):
        self.parent = np.asarray(self.parent, dtype=np.int64)
        self.branch_lengths = np.asarray(self.branch_lengths, dtype=float).copy()
        if self.parent.shape != self.branch_lengths.shape or len(self.names) != self.parent.shape[0]:
            raise DataError("Tree arrays have inconsistent sizes")
        if self.parent.shape[0] == 0 or self.parent[0] != -1:
            raise DataError("Tree node 0 must be the root")
        self.children = [[] for _ in self.names]
        for node in range(1, len(self.names)):
            if not 0 <= self.parent[node] < node:
                raise DataError("Tree nodes must be listed in preorder", record=str(self.names[node]))
            self.children[self.parent[node]].append(node)
        if np.any(self.branch_lengths[1:] < 0):
            raise DataError("Branch lengths must be nonnegative")
        self.branch_lengths[0] = 0.0
        for node in self.leaves:
            if not self.names[node]:
                raise DataError("Every leaf needs a name")
        leaf_names = self.leaf_names
        if len(set(leaf_names)) != len(leaf_names):
            raise DataError("Leaf names must be unique")

    @property
    def num_nodes(self) -> int:
        return len(self.names)

    @property
    def leaves(self) -> List[int]:
        return [node for node in range(self.num_nodes) if not self.children[node]]

    @property
    def leaf_names(self) -> List[str]:
        return [self.names[node] for node in self.leaves]

    @property
    def edges(self) -> np.ndarray:
        """Nodes with an edge above them (every node but the root)."""
        return np.arange(1, self.num_nodes)

    @property
    def postorder(self) -> List[int]:
        # Preorder numbering makes reversed index order a valid postorder
        return list(range(self.num_nodes - 1, -1, -1))

    def is_binary(self) -> bool:
        return all(len(kids) in (0, 2) for kids in self.children)

    def with_branch_lengths(self, edge_lengths: np.ndarray) -> "PhyloTree":
        lengths = np.zeros(self.num_nodes)
        lengths[self.edges] = edge_lengths
        return PhyloTree(names=list(self.names), parent=self.parent.copy(), branch_lengths=lengths)

    def to_newick(self) -> str:
        def render(node: int) -> str:
            label = self.names[node] or ""
            if self.children[node]:
                label = "(" + ",".join(render(child) for child in self.children[node]) + ")" + label
            if node != 0:
                label += f":{self.branch_lengths[node]:.10g}"
            return label

        return render(0) + ";"


def parse_tree(text: TextInput, default_branch_length: float = 0.1) -> PhyloTree:
    """
    Parse one Newick tree.

    Missing branch lengths are set to `default_branch_length`.

    Raises
    ------
    DataError
        On unparsable text or an empty input.
    """
    content = _as_text(text).strip()
    if not content:
        raise DataError("Tree file is empty")
    try:
        tree = Phylo.read(io.StringIO(content), "newick")
    except (NewickError, ValueError) as e:
        raise DataError(f"Invalid Newick tree: {e}") from e

    names: List[Optional[str]] = []
    parent: List[int] = []
    lengths: List[float] = []
    parent_of = {}
    for clade in tree.find_clades(order="preorder"):
        node = len(names)
        names.append(clade.name)
        lengths.append(default_branch_length if clade.branch_length is None else float(clade.branch_length))
        parent.append(parent_of.get(id(clade), -1))
        for child in clade.clades:
            parent_of[id(child)] = node

    return PhyloTree(names=names, parent=np.array(parent), branch_lengths=np.array(lengths))
