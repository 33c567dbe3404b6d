"""Finite rotation subgroups of SO(3) and their index tables.

Supported groups: tetrahedral (12 elements), octahedral (24), icosahedral
(60). A group is built by closing a standard generator pair, snapping each
element back to an exact rotation, and ordering elements canonically
(identity first, then lexicographic on entries rounded to 1e-6) so the
element indexing is reproducible bit-for-bit across runs and platforms.
"""

from dataclasses import dataclass, field

import numpy as np

from .geom import angles_to, rotation_about_axis
from .validation import as_rotation

GROUP_ORDERS = {"tetrahedral": 12, "octahedral": 24, "icosahedral": 60}

_ALIASES = {
    "tetra": "tetrahedral",
    "octa": "octahedral",
    "icosa": "icosahedral",
}

# Dedup threshold for closure, applied to max-abs entry difference. For
# nearby rotations this tracks the angle in radians; genuine distinct
# elements differ by >= 60 degrees, so anything tiny works.
_DEDUP_TOL = 1e-6

# Products of snapped elements must land on an element within this max-abs
# tolerance or table construction fails.
_CLOSURE_TOL = 1e-9

_GOLDEN = (1.0 + np.sqrt(5.0)) / 2.0


def canonical_kind(kind: str) -> str:
    k = _ALIASES.get(kind, kind)
    if k not in GROUP_ORDERS:
        raise ValueError(f"unknown group kind {kind!r}; expected one of {sorted(GROUP_ORDERS)}")
    return k


def _generators(kind: str) -> list[np.ndarray]:
    if kind == "tetrahedral":
        return [rotation_about_axis([0, 0, 1], 180.0), rotation_about_axis([1, 1, 1], 120.0)]
    if kind == "octahedral":
        return [rotation_about_axis([0, 0, 1], 90.0), rotation_about_axis([1, 1, 1], 120.0)]
    # Icosahedral: 72 degrees about a vertex axis of the icosahedron with
    # vertices at cyclic permutations of (0, +-1, +-phi), and 180 degrees
    # about the z axis, which is the midpoint axis of the edge joining
    # (0, 1, phi) and (0, -1, phi).
    return [rotation_about_axis([0.0, 1.0, _GOLDEN], 72.0), rotation_about_axis([0, 0, 1], 180.0)]


def _snap(r: np.ndarray) -> np.ndarray:
    """Re-orthonormalize by Gram-Schmidt on rows; third row from the cross
    product so the result is always proper."""
    r0 = r[0] / np.linalg.norm(r[0])
    r1 = r[1] - np.dot(r[1], r0) * r0
    r1 = r1 / np.linalg.norm(r1)
    r2 = np.cross(r0, r1)
    return np.vstack([r0, r1, r2])


@dataclass
class FiniteRotationGroup:
    """Ordered finite rotation group with multiplication and inverse tables.

    elements[0] is the identity. mul_table[i, j] is the index of
    elements[i] @ elements[j]; inv_table[i] the index of elements[i].T.
    """

    kind: str
    elements: np.ndarray  # (n, 3, 3)
    mul_table: np.ndarray  # (n, n) int
    inv_table: np.ndarray  # (n,) int
    _angles: np.ndarray = field(default=None, repr=False)

    def __len__(self) -> int:
        return self.elements.shape[0]

    @property
    def order(self) -> int:
        return len(self)

    def element_angles_deg(self) -> np.ndarray:
        """Rotation angle of every element, in degrees."""
        if self._angles is None:
            self._angles = angles_to(self.elements, np.eye(3))
        return self._angles

    def neighbor_table(self, k: int) -> np.ndarray:
        """(n, k) indices: row i lists the k group elements nearest to
        elements[i] by angle, ascending, starting with elements[i] itself.

        Row 0 holds the k elements nearest the identity; row i is its left
        translation by elements[i] via the multiplication table.
        """
        if not 1 <= k <= len(self):
            raise ValueError(f"k must be in [1, {len(self)}], got {k}")
        base = self.identity_neighborhood(k)
        return self.mul_table[:, base]

    def identity_neighborhood(self, k: int) -> np.ndarray:
        """Indices of the k elements with smallest rotation angle, ties by index."""
        angles = self.element_angles_deg()
        return np.lexsort((np.arange(len(self)), angles))[:k]

    def left_translation_permutation(self, r_index: int) -> np.ndarray:
        """Permutation pi with pi[j] = index of elements[r_index]^-1 @ elements[j].

        Used as a gather along the group axis: a feature map whose coordinates
        were rotated by elements[r_index] carries the original slot pi[j] at
        slot j.
        """
        return self.mul_table[self.inv_table[r_index], :].copy()

    def right_inverse_translation(self, j_index: int) -> np.ndarray:
        """Permutation tau with tau[a] = index of elements[a] @ elements[j_index]^-1.

        This is the gather used by the group convolution: output slot a reads
        the input feature at tau[a] for kernel tap j.
        """
        return self.mul_table[:, self.inv_table[j_index]].copy()

    def nearest_index(self, r: np.ndarray) -> int:
        """Index of the group element closest to `r` by angle, ties by index."""
        return int(np.argmin(angles_to(self.elements, np.asarray(r, dtype=np.float64))))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "order": len(self),
            "elements": [list(map(float, e.reshape(9))) for e in self.elements],
            "mul_table": self.mul_table.tolist(),
            "inv_table": self.inv_table.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FiniteRotationGroup":
        elements = np.array([np.reshape(e, (3, 3)) for e in d["elements"]], dtype=np.float64)
        return cls(
            kind=canonical_kind(d["kind"]),
            elements=elements,
            mul_table=np.array(d["mul_table"], dtype=np.int64),
            inv_table=np.array(d["inv_table"], dtype=np.int64),
        )


def build_group(kind: str) -> FiniteRotationGroup:
    """Build a finite rotation group by closing its generators.

    Raises if the closure does not terminate at the expected group order,
    which signals a bad generator set.
    """
    kind = canonical_kind(kind)
    expected = GROUP_ORDERS[kind]

    elements: list[np.ndarray] = [np.eye(3)]
    for g in _generators(kind):
        _insert_if_new(elements, _snap(g), expected, kind)

    # Fixed-point iteration over all pairwise products.
    while True:
        grew = False
        current = list(elements)
        for a in current:
            for b in current:
                if _insert_if_new(elements, _snap(a @ b), expected, kind):
                    grew = True
        if not grew:
            break
    if len(elements) != expected:
        raise RuntimeError(
            f"closure of {kind} generators stopped at {len(elements)} elements, expected {expected}"
        )

    # Canonical order: identity first, then lexicographic on rounded entries.
    rest = [e for e in elements if np.max(np.abs(e - np.eye(3))) > _DEDUP_TOL]
    rest.sort(key=lambda e: tuple(np.round(e.reshape(9), 6)))
    ordered = np.stack([np.eye(3)] + rest)

    mul_table = _build_mul_table(ordered)
    inv_table = np.empty(expected, dtype=np.int64)
    for i in range(expected):
        (j,) = np.nonzero(mul_table[i] == 0)[0][:1]
        inv_table[i] = j
    return FiniteRotationGroup(kind=kind, elements=ordered, mul_table=mul_table, inv_table=inv_table)


def _insert_if_new(elements: list[np.ndarray], candidate: np.ndarray, expected: int, kind: str) -> bool:
    for e in elements:
        if np.max(np.abs(e - candidate)) < _DEDUP_TOL:
            return False
    elements.append(candidate)
    if len(elements) > expected:
        raise RuntimeError(f"closure of {kind} generators exceeded order {expected}")
    return True


def _build_mul_table(elements: np.ndarray) -> np.ndarray:
    n = elements.shape[0]
    flat = elements.reshape(n, 9)
    table = np.empty((n, n), dtype=np.int64)
    for i in range(n):
        products = np.einsum("ab,jbc->jac", elements[i], elements).reshape(n, 9)
        # (n products) x (n candidates) max-abs distance
        diff = np.max(np.abs(products[:, None, :] - flat[None, :, :]), axis=2)
        match = np.argmin(diff, axis=1)
        worst = diff[np.arange(n), match].max()
        if worst > _CLOSURE_TOL:
            raise RuntimeError(f"product failed to match a group element (defect {worst:.3e})")
        table[i] = match
    return table


def nearest_group_element(group: FiniteRotationGroup, r: np.ndarray) -> tuple[int, np.ndarray]:
    """Nearest group element index u and residual R_res with R_res @ g_u = R."""
    r = as_rotation(r)
    u = group.nearest_index(r)
    residual = r @ group.elements[u].T
    return u, residual
