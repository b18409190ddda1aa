"""
Line-oriented pulse files.

Phase pulse:
    # pulseforge phase-pulse v1 N=<n> dt_s=<dt>
    <N lines, phase in radians, 17 significant digits>

Discrete pulse (indices are 1-based on disk):
    # pulseforge discrete-pulse v1 N=<n> M=<m>
    v <index> <radians>      (M lines)
    p <index>                (N lines)
"""
import os
import re
from typing import List, Tuple

import numpy as np

from core.errors import InvalidInputError, PulseFileError
from core.pulses import DiscretePulse, PhasePulse
from utils.logger import logger

PHASE_HEADER = re.compile(r"^# pulseforge phase-pulse v1 N=(\d+) dt_s=(\S+)$")
DISCRETE_HEADER = re.compile(r"^# pulseforge discrete-pulse v1 N=(\d+) M=(\d+)$")


def format_float(value: float) -> str:
    return f"{float(value):.17g}"


def format_phase_pulse(pulse: PhasePulse, dt_s: float) -> str:
    lines = [f"# pulseforge phase-pulse v1 N={len(pulse)} dt_s={format_float(dt_s)}"]
    lines.extend(format_float(theta) for theta in pulse.theta)
    return "\n".join(lines) + "\n"


def format_discrete_pulse(dp: DiscretePulse) -> str:
    lines = [f"# pulseforge discrete-pulse v1 N={dp.n_steps} M={dp.m}"]
    lines.extend(f"v {index + 1} {format_float(value)}" for index, value in enumerate(dp.values))
    lines.extend(f"p {int(entry) + 1}" for entry in dp.mapping)
    return "\n".join(lines) + "\n"


def _content_lines(text: str) -> List[str]:
    return [line.strip() for line in text.splitlines() if line.strip()]


def parse_phase_pulse(text: str, path: str = None) -> Tuple[PhasePulse, float]:
    lines = _content_lines(text)
    if not lines:
        raise PulseFileError("empty pulse file", path)
    header = PHASE_HEADER.match(lines[0])
    if header is None:
        raise PulseFileError(f"bad phase-pulse header '{lines[0]}'", path)
    n_steps = int(header.group(1))
    try:
        dt_s = float(header.group(2))
    except ValueError:
        raise PulseFileError(f"bad dt_s '{header.group(2)}' in header", path)
    body = lines[1:]
    if len(body) != n_steps:
        raise PulseFileError(f"header announces N={n_steps} phases, found {len(body)}", path)
    try:
        theta = np.array([float(line) for line in body], dtype=float)
        return PhasePulse(theta), dt_s
    except (ValueError, InvalidInputError) as e:
        raise PulseFileError(f"invalid phase value: {e}", path) from e


def parse_discrete_pulse(text: str, path: str = None) -> DiscretePulse:
    lines = _content_lines(text)
    if not lines:
        raise PulseFileError("empty pulse file", path)
    header = DISCRETE_HEADER.match(lines[0])
    if header is None:
        raise PulseFileError(f"bad discrete-pulse header '{lines[0]}'", path)
    n_steps, m = int(header.group(1)), int(header.group(2))
    body = lines[1:]
    if len(body) != m + n_steps:
        raise PulseFileError(f"expected {m} codebook and {n_steps} mapping lines, found {len(body)}", path)

    values = np.empty(m)
    try:
        for expected, line in enumerate(body[:m], start=1):
            tag, index, value = line.split()
            if tag != "v" or int(index) != expected:
                raise PulseFileError(f"expected codebook line 'v {expected} <radians>', got '{line}'", path)
            values[expected - 1] = float(value)
        mapping = []
        for line in body[m:]:
            tag, index = line.split()
            if tag != "p":
                raise PulseFileError(f"expected mapping line 'p <index>', got '{line}'", path)
            mapping.append(int(index))
        return DiscretePulse.from_one_based(values, mapping)
    except (ValueError, InvalidInputError) as e:
        raise PulseFileError(f"invalid discrete pulse: {e}", path) from e


def _write_text(path: str, text: str):
    try:
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
    except OSError as e:
        logger.error(f"Failed to write pulse file {path}: {e}")
        raise PulseFileError(f"cannot write: {e.strerror or e}", path) from e


def _read_text(path: str) -> str:
    if not os.path.exists(path):
        logger.error(f"Pulse file not found at {path}")
        raise PulseFileError("pulse file not found", path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            return f.read()
    except OSError as e:
        logger.error(f"Failed to read pulse file {path}: {e}")
        raise PulseFileError(f"cannot read: {e.strerror or e}", path) from e


def write_phase_pulse(path: str, pulse: PhasePulse, dt_s: float):
    _write_text(path, format_phase_pulse(pulse, dt_s))
    logger.debug(f"Wrote phase pulse (N={len(pulse)}) to {path}")


def read_phase_pulse(path: str) -> Tuple[PhasePulse, float]:
    try:
        return parse_phase_pulse(_read_text(path), path)
    except PulseFileError as e:
        logger.error(str(e))
        raise


def write_discrete_pulse(path: str, dp: DiscretePulse):
    _write_text(path, format_discrete_pulse(dp))
    logger.debug(f"Wrote discrete pulse (N={dp.n_steps}, M={dp.m}) to {path}")


def read_discrete_pulse(path: str) -> DiscretePulse:
    try:
        return parse_discrete_pulse(_read_text(path), path)
    except PulseFileError as e:
        logger.error(str(e))
        raise
