"""Three-way parameter split for adaptation: LayerNorm set, adapted set,
frozen set.

A parameter is trainable iff its group tag is in the adaptation config.
LayerNorm parameters are a single global set: when LN is selected, every
gamma/beta in the network unfreezes, regardless of which stages are
selected. The head never appears in a named preset and stays frozen.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import Model, ParameterGroup

ADAPTABLE = (
    ParameterGroup.LN,
    ParameterGroup.ST,
    ParameterGroup.S0,
    ParameterGroup.S1,
    ParameterGroup.S2,
)

# The named layer-set presets, from nothing (baseline) to everything below
# the head.
PRESETS = {
    "baseline": frozenset(),
    "LN": frozenset({ParameterGroup.LN}),
    "ST": frozenset({ParameterGroup.ST}),
    "LN,ST": frozenset({ParameterGroup.LN, ParameterGroup.ST}),
    "LN,ST,S0": frozenset({ParameterGroup.LN, ParameterGroup.ST, ParameterGroup.S0}),
    "LN,ST,S0,S1": frozenset(
        {ParameterGroup.LN, ParameterGroup.ST, ParameterGroup.S0, ParameterGroup.S1}
    ),
    "LN,ST,S0,S1,S2": frozenset(
        {
            ParameterGroup.LN,
            ParameterGroup.ST,
            ParameterGroup.S0,
            ParameterGroup.S1,
            ParameterGroup.S2,
        }
    ),
}


@dataclass(frozen=True)
class AdaptConfig:
    groups: frozenset

    def __post_init__(self):
        object.__setattr__(self, "groups", frozenset(self.groups))
        bad = self.groups - set(ADAPTABLE)
        if bad:
            raise ValueError(f"groups not adaptable: {sorted(g.value for g in bad)}")

    @staticmethod
    def from_preset(name: str) -> "AdaptConfig":
        key = name.strip()
        if key == "":
            key = "baseline"
        if key not in PRESETS:
            raise ValueError(f"unknown layer preset {name!r}; valid: {', '.join(PRESETS)}")
        return AdaptConfig(PRESETS[key])

    def label(self) -> str:
        if not self.groups:
            return "baseline"
        order = [g for g in ADAPTABLE if g in self.groups]
        return ",".join(g.value for g in order)


@dataclass(frozen=True)
class PartitionReport:
    n_ln_params: int
    n_adapted_params: int
    n_frozen_params: int
    k_ln_layers: int
    trainable_names: tuple

    @property
    def n_trainable(self) -> int:
        return self.n_ln_params + self.n_adapted_params

    def to_dict(self) -> dict:
        return {
            "n_ln_params": self.n_ln_params,
            "n_adapted_params": self.n_adapted_params,
            "n_frozen_params": self.n_frozen_params,
            "k_ln_layers": self.k_ln_layers,
            "trainable_names": list(self.trainable_names),
        }


def partition(model: Model, config: AdaptConfig) -> PartitionReport:
    """Mark exactly the parameters whose group is selected as trainable and
    freeze the rest; report the resulting three-way scalar split."""
    n_ln = n_adapted = n_frozen = 0
    k_ln = 0
    trainable = []
    for p in model.params:
        if p.group is ParameterGroup.LN and p.name.endswith(".gamma"):
            k_ln += 1
        selected = p.group in config.groups
        p.tensor.requires_grad = selected
        if selected:
            if p.tensor.grad is None:
                p.tensor.grad = np.zeros_like(p.tensor.data)
            trainable.append(p.name)
            if p.group is ParameterGroup.LN:
                n_ln += p.tensor.size
            else:
                n_adapted += p.tensor.size
        else:
            p.tensor.grad = None
            n_frozen += p.tensor.size
    return PartitionReport(n_ln, n_adapted, n_frozen, k_ln, tuple(trainable))


def frozen_mismatches(before: Model, after: Model, config: AdaptConfig) -> list:
    """Names of parameters outside the adapted set whose bits differ."""
    if before.names() != after.names():
        raise ValueError("models have different parameter registries")
    bad = []
    for pb, pa in zip(before.params, after.params):
        if pb.group != pa.group:
            raise ValueError(f"group mismatch for {pb.name}")
        if pb.group in config.groups:
            continue
        if pb.tensor.data.tobytes() != pa.tensor.data.tobytes():
            bad.append(pb.name)
    return bad


def verify_frozen(before: Model, after: Model, config: AdaptConfig) -> bool:
    """True iff every parameter outside the adapted set is bit-identical."""
    return not frozen_mismatches(before, after, config)
