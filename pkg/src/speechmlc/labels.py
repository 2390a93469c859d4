"""Canonical style label order and axis grouping."""

LABELS = ("Female", "Male", "Adult", "Teenager", "Dark", "Bright", "Rough", "Smooth")
N_LABELS = len(LABELS)
N_ANNOTATORS = 8

# (positive, positive) pairs that are mutually exclusive within one axis
AXES = {
    "gender": ("Female", "Male"),
    "age": ("Adult", "Teenager"),
    "tone": ("Dark", "Bright"),
    "texture": ("Rough", "Smooth"),
}


def label_index(name: str) -> int:
    """Index of a label, matched case-insensitively."""
    lowered = name.strip().lower()
    for i, label in enumerate(LABELS):
        if label.lower() == lowered:
            return i
    raise KeyError(f"unknown label {name!r}; expected one of {', '.join(LABELS)}")


def axis_partner(index: int) -> int:
    """Index of the other label on the same axis."""
    return index ^ 1
