"""Behavioural model of the SRAM in-memory-computing macro.

A macro has 8 banks of 64x64 cells. Each bank produces one binary output:
its weight rows hold one output channel's fan-in (row-major, 64 per row),
one more row holds the folded BN bias as a +-1 pattern read with input 1.
Charge sharing is modelled as the exact signed sum; the MAV offset and the
sense-amplifier variation are additive Gaussian terms in units of one
cell contribution.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np

from .tensorcore import ShapeMismatch

log = logging.getLogger(__name__)

BANKS = 8
ROWS = 64
COLS = 64
BIAS_LIMIT = 64


class MappingMethod(str, enum.Enum):
    ADD = "add"
    ABSOLUTE_ADD = "absolute_add"
    SUB = "sub"
    ABSOLUTE_SUB = "absolute_sub"


MAPPING_ORDER = tuple(MappingMethod)


class MacroNotLoaded(RuntimeError):
    pass


@dataclass(frozen=True)
class BiasMapping:
    method: MappingMethod = MappingMethod.ADD
    width: int = COLS

    def __post_init__(self):
        object.__setattr__(self, "method", MappingMethod(self.method))

    @property
    def limit(self) -> int:
        return self.width


def _round_to_parity(x, parity: int, up: bool):
    """Round integers onto the grid ``{n : n % 2 == parity}``."""
    x = np.asarray(x, dtype=np.int64)
    off = (x - parity) % 2
    return np.where(off == 0, x, x + 1 if up else x - 1)


def round_bias(bias, method: MappingMethod | str, width: int = COLS):
    """Apply one mapping method without clamping (elementwise)."""
    method = MappingMethod(method)
    parity = width % 2
    b = np.asarray(bias, dtype=np.int64)
    if method is MappingMethod.ADD:
        return _round_to_parity(b, parity, up=True)
    if method is MappingMethod.SUB:
        return _round_to_parity(b, parity, up=False)
    sign = np.where(b < 0, -1, 1)
    mag = _round_to_parity(np.abs(b), parity, up=method is MappingMethod.ABSOLUTE_ADD)
    if parity == 0:
        return sign * mag
    # odd widths: |b| = 0 rounded down would go negative
    return sign * np.maximum(mag, 1) if method is MappingMethod.ABSOLUTE_SUB else sign * mag


def map_bias_values(bias, mapping: BiasMapping = BiasMapping()):
    """Vectorised mapping: returns ``(mapped, clamped_mask)``."""
    rounded = round_bias(bias, mapping.method, mapping.width)
    mapped = np.clip(rounded, -mapping.limit, mapping.limit)
    return mapped, mapped != rounded


def bias_cells(mapped: int, width: int = COLS) -> np.ndarray:
    """Cell pattern whose +-1 row sum equals ``mapped``."""
    ones = (width + int(mapped)) // 2
    if (width + mapped) % 2 or not 0 <= ones <= width:
        raise ValueError(f"{mapped} is not representable on a width-{width} row")
    cells = np.zeros(width, dtype=np.uint8)
    cells[:ones] = 1
    return cells


def map_bias(bias: int, mapping: BiasMapping = BiasMapping()):
    """Map one folded bias onto a wordline.

    Returns ``(cells, mapped_value, clamped)``; reading the row with input 1
    gives back ``mapped_value``.
    """
    mapped, clamped = map_bias_values(np.int64(bias), mapping)
    mapped = int(mapped)
    if clamped:
        log.info("bias %d clamped to %d", bias, mapped)
    return bias_cells(mapped, mapping.width), mapped, bool(clamped)


def read_row(cells: np.ndarray, inputs=None) -> int:
    """Signed sum of a row: cell 1 -> +1, 0 -> -1, times the +-1 inputs."""
    w = 2 * np.asarray(cells, dtype=np.int64) - 1
    if inputs is None:
        return int(w.sum())
    return int((w * np.asarray(inputs, dtype=np.int64)).sum())


# -- noise --------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseModel:
    """Offset noise on the MAV differential, in one-cell units.

    ``column_offsets`` overrides the random MAV offsets with fixed values:
    a mapping ``layer -> per-channel array`` for network use, or a plain
    per-bank array for a single macro.
    """

    mav_offset_sigma: float = 0.0
    sa_sigma: float = 0.0
    static_per_column: bool = True
    seed: int = 0
    column_offsets: dict | tuple | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.mav_offset_sigma < 0 or self.sa_sigma < 0:
            raise ValueError("noise sigmas must be non-negative")

    @property
    def is_zero(self) -> bool:
        if self.mav_offset_sigma or self.sa_sigma:
            return False
        if self.column_offsets is None:
            return True
        vals = self.column_offsets.values() if isinstance(self.column_offsets, dict) else [self.column_offsets]
        return all(not np.any(np.asarray(v)) for v in vals)

    def static_offsets(self, key: int, n: int) -> np.ndarray:
        """Per-column MAV offsets for macro/layer ``key`` (deterministic in seed)."""
        if self.column_offsets is not None:
            src = self.column_offsets
            if isinstance(src, dict):
                vals = src.get(key, src.get(str(key)))
                if vals is None:
                    return np.zeros(n)
            else:
                vals = src
            vals = np.asarray(vals, dtype=np.float64)
            if vals.ndim == 0:
                vals = np.full(n, float(vals))
            if vals.shape != (n,):
                raise ShapeMismatch(f"column offsets for {key} have shape {vals.shape}, need ({n},)")
            return vals
        if not self.static_per_column or self.mav_offset_sigma == 0:
            return np.zeros(n)
        rng = np.random.default_rng([self.seed, 0x4D4156, key])
        return rng.normal(0.0, self.mav_offset_sigma, size=n)

    def read_noise(self, rng: np.random.Generator, shape) -> np.ndarray:
        """Noise redrawn on every read: SA variation, plus MAV offset when not static."""
        eps = np.zeros(shape)
        if self.sa_sigma:
            eps = eps + rng.normal(0.0, self.sa_sigma, size=shape)
        if self.mav_offset_sigma and not self.static_per_column and self.column_offsets is None:
            eps = eps + rng.normal(0.0, self.mav_offset_sigma, size=shape)
        return eps

    def to_dict(self) -> dict:
        d = {"mav_offset_sigma": self.mav_offset_sigma, "sa_sigma": self.sa_sigma,
             "static_per_column": self.static_per_column, "seed": self.seed}
        if self.column_offsets is not None:
            src = self.column_offsets
            d["column_offsets"] = ({str(k): np.asarray(v).tolist() for k, v in src.items()}
                                   if isinstance(src, dict) else np.asarray(src).tolist())
        return d


ZERO_NOISE = NoiseModel()


def sign_pm1(x) -> np.ndarray:
    return np.where(np.asarray(x) >= 0, 1, -1).astype(np.int8)


# -- macro --------------------------------------------------------------------

class ImcMacro:
    """One 8-bank macro. Bank ``b`` computes output channel ``b`` of its load."""

    def __init__(self, macro_id: int = 0, banks: int = BANKS, rows: int = ROWS, cols: int = COLS):
        self.macro_id = macro_id
        self.cells = np.zeros((banks, rows, cols), dtype=np.uint8)
        self.fan_in = 0
        self.weight_rows = 0
        self.bias_rows = 0
        self.active_banks = 0
        self.mapped_bias = np.zeros(banks, dtype=np.int64)
        self.polarity = np.ones(banks, dtype=np.int8)

    @property
    def banks(self) -> int:
        return self.cells.shape[0]

    @property
    def loaded(self) -> bool:
        return self.active_banks > 0

    def load(self, weights, bias, polarity=None, mapping: BiasMapping = BiasMapping()):
        """Write per-bank +-1 weight vectors (banks, fan_in) and their biases."""
        w = np.asarray(weights)
        if w.ndim != 2:
            w = w.reshape(w.shape[0], -1)
        n_banks, fan_in = w.shape
        rows, cols = self.cells.shape[1:]
        weight_rows = -(-fan_in // cols)
        if n_banks > self.banks:
            raise ShapeMismatch(f"{n_banks} channels > {self.banks} banks")
        if weight_rows + 1 > rows:
            raise ShapeMismatch(f"fan-in {fan_in} needs {weight_rows} rows plus a bias row, have {rows}")
        if mapping.width != cols:
            mapping = BiasMapping(mapping.method, cols)
        self.cells[:] = 0
        padded = np.zeros((n_banks, weight_rows * cols), dtype=np.uint8)
        padded[:, :fan_in] = (w > 0)
        self.cells[:n_banks, :weight_rows] = padded.reshape(n_banks, weight_rows, cols)
        mapped, clamped = map_bias_values(np.asarray(bias, dtype=np.int64), mapping)
        for b in range(n_banks):
            self.cells[b, weight_rows] = bias_cells(int(mapped[b]), cols)
        self.mapped_bias[:] = 0
        self.mapped_bias[:n_banks] = mapped
        self.polarity[:] = 1
        if polarity is not None:
            self.polarity[:n_banks] = polarity
        self.fan_in = fan_in
        self.weight_rows = weight_rows
        self.bias_rows = 1
        self.active_banks = n_banks
        return clamped

    def weights(self) -> np.ndarray:
        """Stored weights as +-1, (active_banks, fan_in)."""
        flat = self.cells[:self.active_banks, :self.weight_rows].reshape(self.active_banks, -1)
        return (2 * flat[:, :self.fan_in].astype(np.int8) - 1)

    def digital_sums(self, inputs) -> np.ndarray:
        """Exact MAV sums per bank (weight rows + bias row) for +-1 inputs."""
        if not self.loaded:
            raise MacroNotLoaded("macro has no weights loaded")
        x = np.asarray(inputs, dtype=np.int64)
        if x.shape[-1] != self.fan_in:
            raise ShapeMismatch(f"input has {x.shape[-1]} elements, fan-in is {self.fan_in}")
        cols = self.cells.shape[2]
        # inactive columns of the last weight row are neither precharged nor counted
        padded = np.zeros(x.shape[:-1] + (self.weight_rows * cols,), dtype=np.int64)
        padded[..., :self.fan_in] = x
        w = 2 * self.cells[:self.active_banks, :self.weight_rows].reshape(self.active_banks, -1).astype(np.int64) - 1
        sums = padded @ w.T
        bias = (2 * self.cells[:self.active_banks, self.weight_rows].astype(np.int64) - 1).sum(axis=-1)
        return sums + bias

    def mav_compute(self, inputs, noise: NoiseModel = ZERO_NOISE,
                    rng: np.random.Generator | None = None) -> np.ndarray:
        """Sense-amplifier outputs (+-1 per active bank) for one or more input vectors.

        Polarity is not applied here; that is the digital BN decoder's job.
        """
        s = self.digital_sums(inputs).astype(np.float64)
        if noise.is_zero:
            return sign_pm1(s)
        rng = rng if rng is not None else np.random.default_rng([noise.seed, self.macro_id])
        s = s + noise.static_offsets(self.macro_id, self.banks)[:self.active_banks]
        s = s + noise.read_noise(rng, s.shape)
        return sign_pm1(s)


# -- test mode ------------------------------------------------------------------

@dataclass
class BankRecord:
    bank: int
    disagreements: int
    estimated_offset: float
    patterns: int
    # largest |margin| among disagreements: a lower bound on the offset size
    max_margin: int = 0


@dataclass
class VariationReport:
    macro_id: int
    records: list[BankRecord]

    def to_rows(self) -> list[dict]:
        return [{"macro": self.macro_id, "bank": r.bank, "disagreements": r.disagreements,
                 "estimated_offset": r.estimated_offset, "patterns": r.patterns,
                 "max_margin": r.max_margin}
                for r in self.records]

    def worst_bank(self) -> int:
        return max(self.records, key=lambda r: (r.disagreements, abs(r.estimated_offset))).bank


def test_patterns(fan_in: int, count: int, seed: int = 0) -> np.ndarray:
    """Deterministic random +-1 input patterns for test mode."""
    rng = np.random.default_rng([seed, 0x7E57])
    return np.where(rng.random((count, fan_in)) < 0.5, -1, 1).astype(np.int8)


def test_mode(macro: ImcMacro, patterns, noise: NoiseModel = ZERO_NOISE,
              rng: np.random.Generator | None = None) -> VariationReport:
    """Run known-answer patterns and compare each bank with the digital result.

    The estimated offset of a bank is the mean signed margin ``-s`` of the
    patterns it got wrong: the shift that brings the exact sum ``s`` onto
    the comparator threshold.
    """
    patterns = np.asarray(patterns)
    expected_s = macro.digital_sums(patterns)
    expected = sign_pm1(expected_s)
    observed = macro.mav_compute(patterns, noise, rng)
    wrong = observed != expected
    records = []
    for b in range(macro.active_banks):
        mask = wrong[:, b]
        margins = -expected_s[mask, b]
        est = float(np.mean(margins)) if mask.any() else 0.0
        peak = int(np.max(np.abs(margins))) if mask.any() else 0
        records.append(BankRecord(b, int(mask.sum()), est, len(patterns), peak))
    return VariationReport(macro.macro_id, records)


# -- mapping selection ----------------------------------------------------------

def select_mapping(evaluate, methods=MAPPING_ORDER) -> tuple[MappingMethod, dict]:
    """Pick the method with the best accuracy; ties go to the earliest method.

    ``evaluate(method) -> accuracy`` runs the whole model with that mapping.
    """
    scores = {}
    for m in methods:
        scores[MappingMethod(m)] = float(evaluate(MappingMethod(m)))
    best = max(scores, key=lambda m: (scores[m], -MAPPING_ORDER.index(m)))
    return best, scores


test_mode.__test__ = False
test_patterns.__test__ = False
