from pathlib import Path
import hashlib
import math
import os
import re
import shutil
import tempfile

# Regex pattern for one "name:weight" entry of a proportion list
REGEX_PROPORTION = re.compile(r"^\s*([A-Za-z_][\w-]*)\s*:\s*([0-9]*\.?[0-9]+)\s*$")

# Environment variable consulted when no --seed flag is given
SEED_ENV_VAR = "MISDD_SEED"


def derive_seed(seed: int, *keys: object) -> int:
    """
    Derives an independent 63-bit seed from a base seed and a sequence of keys.

    The derivation hashes the textual form of the keys, so the result does not
    depend on the order in which sibling streams are created.

    Args:
        seed (int): The base seed.
        *keys (object): Identifiers of the stream (split name, sample index, cell, ...).

    Returns:
        int: The derived seed.
    """
    text = "/".join([str(seed), *(str(key) for key in keys)])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def resolve_seed(flag_value: int | None) -> int:
    """
    Resolves the effective seed: explicit flag, then MISDD_SEED, then 0.

    Args:
        flag_value (int | None): The value of the --seed flag, if given.

    Returns:
        int: The effective seed.

    Raises:
        ValueError: If MISDD_SEED is set but is not an integer.
    """
    if flag_value is not None:
        return flag_value
    env_value = os.environ.get(SEED_ENV_VAR)
    if env_value is None or not env_value.strip():
        return 0
    try:
        return int(env_value)
    except ValueError:
        raise ValueError(f"{SEED_ENV_VAR} must be an integer, got {env_value!r}")


def round_half_up(value: float) -> int:
    """
    Rounds to the nearest integer with halves rounded up.

    A 1e-9 guard absorbs representation error such as 0.7 * 1000 = 700.0000000000001.

    Args:
        value (float): A non-negative value.

    Returns:
        int: The rounded count.
    """
    return int(math.floor(value + 0.5 + 1e-9))


def parse_int_list(text: str) -> list[int]:
    """
    Parses a comma-separated list of integers such as "1,2,4".

    Args:
        text (str): The list text.

    Returns:
        list[int]: The parsed integers, in order.
    """
    return [int(part) for part in text.split(",") if part.strip()]


def parse_float_list(text: str) -> list[float]:
    """
    Parses a comma-separated list of floats such as "0.3,0.5,0.7".

    Args:
        text (str): The list text.

    Returns:
        list[float]: The parsed values, in order.
    """
    return [float(part) for part in text.split(",") if part.strip()]


def parse_proportions(text: str) -> dict[str, float]:
    """
    Parses a proportion list such as "rgb_only:0.4,depth_only:0.4,combined:0.2".

    Args:
        text (str): The proportion text.

    Returns:
        dict[str, float]: Mapping of name to weight.

    Raises:
        ValueError: If an entry is malformed.
    """
    proportions: dict[str, float] = {}
    for part in text.split(","):
        if not part.strip():
            continue
        if match := REGEX_PROPORTION.match(part):
            proportions[match.group(1)] = float(match.group(2))
        else:
            raise ValueError(f"Malformed proportion entry: {part!r}")
    return proportions


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    """
    Writes a file through a temporary sibling followed by a rename.

    Args:
        path (str | Path): Destination file.
        data (bytes): File content.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    """
    Writes a UTF-8 text file atomically (see atomic_write_bytes).

    Args:
        path (str | Path): Destination file.
        text (str): File content.
    """
    atomic_write_bytes(path, text.encode("utf-8"))


def publish_directory(staging: Path, target: Path) -> None:
    """
    Moves a fully written staging directory to its final location.

    An existing target is moved aside first and removed only after the new
    directory is in place, so readers never observe a half-written tree.

    Args:
        staging (Path): The completed staging directory.
        target (Path): The final directory path.
    """
    backup: Path | None = None
    if target.exists():
        backup = target.with_name(f".{target.name}.old")
        if backup.exists():
            shutil.rmtree(backup)
        os.replace(target, backup)
    os.replace(staging, target)
    if backup is not None:
        shutil.rmtree(backup)
