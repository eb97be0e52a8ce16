"""
Storyspace - Ablation Variants

Named network variants used in the ablation study:
- full: hide, imagine (with non-local relations) and tell
- no_blinding (INet-B): no feature hiding during training
- no_nonlocal (INet-N): non-local layers replaced by identity
- no_telling (INet-R): telling block replaced by identity

Pick one with INetConfig.ablation (or --ablation on the command line).
"""

from dataclasses import dataclass
from typing import List

from storyspace_inputs import ConfigError


# ============================================================================
# VARIANT REGISTRY
# ============================================================================

@dataclass(frozen=True)
class AblationVariant:
    """Which stages of the hide / imagine / tell pipeline are active."""
    name: str
    label: str            # Name used in result tables
    blinding: bool        # Hide slot features during training
    nonlocal_layers: bool # Non-local relational layer inside each block
    telling: bool         # Second (telling) block
    description: str


ABLATION_VARIANTS = {
    "full": AblationVariant(
        name="full",
        label="INet",
        blinding=True,
        nonlocal_layers=True,
        telling=True,
        description="Complete hide-and-tell network",
    ),
    "no_blinding": AblationVariant(
        name="no_blinding",
        label="INet-B",
        blinding=False,
        nonlocal_layers=True,
        telling=True,
        description="Trained without hiding any slot",
    ),
    "no_nonlocal": AblationVariant(
        name="no_nonlocal",
        label="INet-N",
        blinding=True,
        nonlocal_layers=False,
        telling=True,
        description="Recurrent blocks without relational embedding",
    ),
    "no_telling": AblationVariant(
        name="no_telling",
        label="INet-R",
        blinding=True,
        nonlocal_layers=True,
        telling=False,
        description="Imagining block feeds the decoder directly",
    ),
}


# ============================================================================
# HELPER FUNCTIONS
# ============================================================================

def get_ablation_variant(name: str) -> AblationVariant:
    """Get a variant by name; hyphenated spellings (no-blinding) are accepted."""
    key = name.strip().lower().replace("-", "_")
    if key not in ABLATION_VARIANTS:
        raise ConfigError(f"unknown ablation '{name}' (choose from {', '.join(ABLATION_VARIANTS)})")
    return ABLATION_VARIANTS[key]


def list_ablation_variants() -> List[str]:
    """List all available variant names."""
    return list(ABLATION_VARIANTS.keys())


def preview_ablation_variant(variant: AblationVariant) -> str:
    """Text summary of a variant, one stage per line."""
    def on_off(flag: bool) -> str:
        return "on" if flag else "off"

    return (
        f"VARIANT: {variant.label} ({variant.name})\n"
        f"{variant.description}\n"
        f"  Blinding:  {on_off(variant.blinding)}\n"
        f"  Non-local: {on_off(variant.nonlocal_layers)}\n"
        f"  Telling:   {on_off(variant.telling)}\n"
    )
