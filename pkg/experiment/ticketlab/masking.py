"""Binary masks over the prunable entries of a ParamSet."""

from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .errors import CongruenceError, MaskInvariantError
from .model import ParamSet

MASKED_SUFFIX = "⊙m"


@dataclass
class Mask:
    """One boolean tensor per prunable ParamSet entry, in entry order.

    Exempt entries (by default the first prunable layer) are all-ones.
    `metadata` carries the generating algorithm and its settings.
    """

    entries: list[tuple[str, np.ndarray]]
    exempt_names: frozenset = frozenset()
    metadata: dict = field(default_factory=dict)

    @classmethod
    def ones(cls, params: ParamSet, exempt_names: Iterable[str] = ()) -> "Mask":
        return cls(
            [(e.name, np.ones(e.value.shape, dtype=bool)) for e in params.prunable()],
            frozenset(exempt_names),
        )

    @property
    def names(self) -> list[str]:
        return [name for name, _ in self.entries]

    def as_dict(self) -> dict[str, np.ndarray]:
        return dict(self.entries)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.as_dict()[name]

    def kept_counts(self) -> list[int]:
        return [int(m.sum()) for _, m in self.entries]

    def sizes(self) -> list[int]:
        return [int(m.size) for _, m in self.entries]

    def check_congruent(self, params: ParamSet) -> None:
        prunable = params.prunable()
        if [e.name for e in prunable] != self.names:
            raise CongruenceError(f"mask entries {self.names} do not match prunable entries {params.prunable_names}")
        for entry, (name, m) in zip(prunable, self.entries):
            if entry.value.shape != m.shape:
                raise CongruenceError(f"mask for {name} has shape {m.shape}, weights have {entry.value.shape}")

    def equals(self, other: "Mask") -> bool:
        return self.names == other.names and all(np.array_equal(a, b) for (_, a), (_, b) in zip(self.entries, other.entries))


def first_prunable_exempt(params: ParamSet, exempt_first: bool = True) -> frozenset:
    """Names exempt from pruning: the first prunable layer when `exempt_first` is set."""
    names = params.prunable_names
    return frozenset(names[:1]) if exempt_first and names else frozenset()


def apply_mask(params: ParamSet, mask: Mask) -> ParamSet:
    """θ⊙m on prunable entries; biases and other non-prunable entries pass through."""
    mask.check_congruent(params)
    keep = mask.as_dict()
    values = []
    for entry in params:
        m = keep.get(entry.name)
        values.append(entry.value * m if m is not None else entry.value.copy())
    provenance = params.provenance
    if not provenance.endswith(MASKED_SUFFIX):
        provenance += MASKED_SUFFIX
    return params.with_values(values, provenance=provenance)


def sparsity(mask: Mask) -> float:
    """Fraction of zeros over all prunable entries."""
    total = sum(mask.sizes())
    if total == 0:
        return 0.0
    return 1.0 - sum(mask.kept_counts()) / total


def per_layer_sparsity(mask: Mask) -> list[float]:
    return [1.0 - kept / size for kept, size in zip(mask.kept_counts(), mask.sizes())]


def mask_from_support(params: ParamSet, exempt_names: Iterable[str] = ()) -> Mask:
    """Mask that is 1 exactly where the weight is nonzero (exempt entries all-ones)."""
    exempt = frozenset(exempt_names)
    entries = []
    for e in params.prunable():
        if e.name in exempt:
            entries.append((e.name, np.ones(e.value.shape, dtype=bool)))
        else:
            entries.append((e.name, e.value != 0))
    return Mask(entries, exempt)


@dataclass(frozen=True)
class MaskViolation:
    name: str
    flat_index: int
    value: float

    def __str__(self) -> str:
        return f"{self.name}[{self.flat_index}] = {self.value!r} outside the mask support"


def assert_mask_invariant(params: ParamSet, mask: Mask) -> Optional[MaskViolation]:
    """Check support(params) ⊆ support(mask) on prunable entries.

    Returns:
        None when the invariant holds, otherwise the first violating (name, flat index).
    """
    keep = mask.as_dict()
    for entry in params.prunable():
        m = keep.get(entry.name)
        if m is None:
            continue
        if m.shape != entry.value.shape:
            raise CongruenceError(f"mask for {entry.name} has shape {m.shape}, weights have {entry.value.shape}")
        bad = np.flatnonzero((entry.value != 0) & ~m)
        if bad.size:
            idx = int(bad[0])
            return MaskViolation(entry.name, idx, float(entry.value.ravel()[idx]))
    return None


def check_mask_invariant(params: ParamSet, mask: Mask, epoch: Optional[int] = None) -> None:
    """Raise `MaskInvariantError` when `assert_mask_invariant` reports a violation."""
    violation = assert_mask_invariant(params, mask)
    if violation is not None:
        raise MaskInvariantError(violation, epoch)
