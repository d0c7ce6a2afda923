import math
import os
import tempfile
from fractions import Fraction
from pathlib import Path

from prescope.policytype import PolicyKind, SchedulerPolicy


def round_half_up(value: float | Fraction) -> int:
    return math.floor(value + Fraction(1, 2)) if isinstance(value, Fraction) else math.floor(value + 0.5)


def parse_policy(text: str) -> SchedulerPolicy:
    name, _, argument = text.strip().lower().partition(":")
    try:
        kind = PolicyKind(name)
    except ValueError as e:
        choices = ", ".join(kind.value for kind in PolicyKind)
        message = f"Unknown policy '{text}', expected one of: {choices}"
        raise ValueError(message) from e

    if kind == PolicyKind.FIXED_PREFETCH:
        if not argument.isdigit():
            message = f"Policy '{text}' needs a prefetch count, e.g. 'fixed:2'"
            raise ValueError(message)
        return SchedulerPolicy(kind, int(argument))

    if argument:
        message = f"Policy '{name}' takes no argument, got '{text}'"
        raise ValueError(message)

    return SchedulerPolicy(kind)


def write_text_atomic(destination_path: Path, content: str) -> None:
    destination_path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(
        prefix=f".{destination_path.name}.",
        dir=destination_path.parent,
    )
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
            f.write(content)
        Path(tmp_name).replace(destination_path)
    except BaseException:
        Path(tmp_name).unlink(missing_ok=True)
        raise
