"""Final-answer extraction, normalization, and equivalence for model completions.

Math completions end in one of three conventions: a ``#### value`` delimiter
line, a LaTeX ``\\boxed{...}``, or a bare number somewhere in the prose. This
module pulls the candidate out, normalizes it into an exact rational whenever
the text allows it, and defines the equality and canonical-key relations the
interaction loop uses to intersect answer sets.

Only a small LaTeX subset is interpreted (\\boxed, \\frac, \\sqrt, \\pi);
anything else survives as a cleaned-up Symbolic string rather than an error.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction

from .errors import NoAnswerFound

logger = logging.getLogger(__name__)

__all__ = [
    "AnswerKind",
    "AnswerValue",
    "ExtractionStrategy",
    "answer_from_json",
    "answer_to_json",
    "answers_equal",
    "canonical_key",
    "extract_final_answer",
    "extract_with_strategy",
    "normalize_answer",
    "render_answer",
]

# Relative tolerance used whenever a Decimal value takes part in a comparison.
DECIMAL_REL_TOL = 1e-6


class AnswerKind(Enum):
    RATIONAL = "rational"
    DECIMAL = "decimal"
    SYMBOLIC = "symbolic"


class ExtractionStrategy(Enum):
    """How the final answer was located inside a completion."""

    GSM_DELIMITER = "gsm-delimiter"
    BOXED_LATEX = "boxed-latex"
    LAST_NUMBER = "last-number"
    AUTO = "auto"


@dataclass(frozen=True)
class AnswerValue:
    """A parsed final answer.

    Exactly one of ``rational``, ``decimal``, ``symbolic`` is populated,
    matching ``kind``. ``raw`` keeps the pre-normalization text for debugging
    and never takes part in equality or keying.
    """

    kind: AnswerKind
    raw: str = ""
    rational: Fraction | None = None
    decimal: float | None = None
    symbolic: str | None = None

    def __post_init__(self):
        populated = [
            self.rational is not None,
            self.decimal is not None,
            self.symbolic is not None,
        ]
        if sum(populated) != 1:
            raise ValueError("exactly one payload field must be set")
        if self.kind is AnswerKind.RATIONAL and self.rational is None:
            raise ValueError("kind=rational requires a rational payload")
        if self.kind is AnswerKind.DECIMAL and self.decimal is None:
            raise ValueError("kind=decimal requires a decimal payload")
        if self.kind is AnswerKind.SYMBOLIC and self.symbolic is None:
            raise ValueError("kind=symbolic requires a symbolic payload")

    @staticmethod
    def from_rational(value: Fraction | int, raw: str = "") -> "AnswerValue":
        # Fraction keeps itself in lowest terms with a positive denominator.
        return AnswerValue(AnswerKind.RATIONAL, raw=raw, rational=Fraction(value))

    @staticmethod
    def from_decimal(value: float, raw: str = "") -> "AnswerValue":
        return AnswerValue(AnswerKind.DECIMAL, raw=raw, decimal=float(value))

    @staticmethod
    def from_symbolic(text: str, raw: str = "") -> "AnswerValue":
        return AnswerValue(AnswerKind.SYMBOLIC, raw=raw, symbolic=_canonical_symbolic(text))


# --------------------------------------------------------------------------
# cleaning and parsing

_DASH_VARIANTS = {"−": "-", "–": "-", "—": "-"}
_CURRENCY_CHARS = "$€£¥"
_TRAILING_PUNCT = ".,;:!?"

_INT_RE = re.compile(r"^[-+]?\d+$")
_DECIMAL_RE = re.compile(r"^[-+]?(?:\d+\.\d*|\.\d+|\d+)(?:[eE][-+]?\d+)?$")
_SLASH_FRACTION_RE = re.compile(r"^([-+]?\d+)\s*/\s*([-+]?\d+)$")
_LATEX_FRACTION_RE = re.compile(r"^\\[dt]?frac\s*\{([^{}]+)\}\s*\{([^{}]+)\}$")
_GROUPING_COMMA_RE = re.compile(r"(?<=\d),(?=\d{3}(?:\D|$))")
_UNIT_TAIL_RE = re.compile(r"^(.+?)\s+([A-Za-z][A-Za-z .]*)$")


def _strip_outer_braces(text: str) -> str:
    """Remove braces that wrap the whole string, repeatedly, only when balanced."""
    s = text.strip()
    while len(s) >= 2 and s[0] == "{" and s[-1] == "}":
        depth = 0
        wraps = True
        for i, ch in enumerate(s):
            if ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0 and i != len(s) - 1:
                    wraps = False
                    break
        if not wraps or depth != 0:
            break
        s = s[1:-1].strip()
    return s


def _canonical_symbolic(text: str) -> str:
    return re.sub(r"\s+", " ", _strip_outer_braces(text)).strip()


def _clean(raw: str) -> str:
    s = raw.strip()
    for variant, plain in _DASH_VARIANTS.items():
        s = s.replace(variant, plain)
    # LaTeX-escaped currency/percent marks become their plain forms first.
    s = s.replace("\\$", "$").replace("\\%", "%")
    for ch in _CURRENCY_CHARS:
        s = s.replace(ch, "")
    s = _GROUPING_COMMA_RE.sub("", s)
    s = s.strip()
    while s and (s[-1] in _TRAILING_PUNCT or s[-1] == "%"):
        s = s[:-1].rstrip()
    return s.strip()


def _parse_numeric(text: str) -> Fraction | None:
    """Parse integers, decimals, and a/b style fractions; None when not numeric."""
    s = text.strip()
    if not s:
        return None
    if _INT_RE.match(s):
        return Fraction(int(s))
    if _DECIMAL_RE.match(s):
        # Fraction parses decimal and scientific literals exactly.
        try:
            return Fraction(s)
        except (ValueError, ZeroDivisionError):
            return None
    m = _SLASH_FRACTION_RE.match(s)
    if m:
        den = int(m.group(2))
        if den == 0:
            return None
        return Fraction(int(m.group(1)), den)
    m = _LATEX_FRACTION_RE.match(s)
    if m:
        num = _parse_numeric(m.group(1))
        den = _parse_numeric(m.group(2))
        if num is None or den is None or den == 0:
            return None
        return num / den
    return None


def normalize_answer(raw: str) -> AnswerValue:
    """Canonicalize one raw answer string.

    Strips currency and percent marks, digit-grouping commas, trailing
    punctuation, and trailing unit words, then parses integers, finite
    decimals, ``a/b``, and ``\\frac{a}{b}`` into exact rationals. Whatever
    resists numeric parsing comes back as Symbolic text; this function never
    raises.
    """
    cleaned = _strip_outer_braces(_clean(raw))
    value = _parse_numeric(cleaned)
    if value is None:
        # "78 dollars" style: drop a trailing word run when the head is numeric.
        m = _UNIT_TAIL_RE.match(cleaned)
        if m:
            value = _parse_numeric(m.group(1))
    if value is not None:
        return AnswerValue(AnswerKind.RATIONAL, raw=raw, rational=value)
    return AnswerValue(AnswerKind.SYMBOLIC, raw=raw, symbolic=_canonical_symbolic(cleaned))


# --------------------------------------------------------------------------
# extraction

_GSM_DELIMITER_RE = re.compile(r"####\s*([^\n]*)")
_LAST_NUMBER_RE = re.compile(r"[-+]?\d[\d,]*(?:\.\d+)?")


def _candidate_gsm(completion: str) -> str | None:
    matches = _GSM_DELIMITER_RE.findall(completion)
    if not matches:
        return None
    candidate = matches[-1].strip()
    return candidate or None


def _candidate_boxed(completion: str) -> str | None:
    # Take the last \boxed{...}, matching braces so nested groups survive.
    start = completion.rfind("\\boxed{")
    if start < 0:
        return None
    i = start + len("\\boxed{")
    depth = 1
    out = []
    while i < len(completion) and depth > 0:
        ch = completion[i]
        if ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                break
        out.append(ch)
        i += 1
    if depth != 0:
        return None
    candidate = "".join(out).strip()
    return candidate or None


def _candidate_last_number(completion: str) -> str | None:
    matches = _LAST_NUMBER_RE.findall(completion)
    return matches[-1] if matches else None


_STRATEGY_FNS = {
    ExtractionStrategy.GSM_DELIMITER: _candidate_gsm,
    ExtractionStrategy.BOXED_LATEX: _candidate_boxed,
    ExtractionStrategy.LAST_NUMBER: _candidate_last_number,
}

_AUTO_ORDER = (
    ExtractionStrategy.GSM_DELIMITER,
    ExtractionStrategy.BOXED_LATEX,
    ExtractionStrategy.LAST_NUMBER,
)


def extract_with_strategy(
    completion: str,
    hint: ExtractionStrategy = ExtractionStrategy.AUTO,
) -> tuple[AnswerValue, ExtractionStrategy]:
    """Extract the final answer and report which strategy produced it."""
    order = _AUTO_ORDER if hint is ExtractionStrategy.AUTO else (hint,)
    for strategy in order:
        candidate = _STRATEGY_FNS[strategy](completion)
        if candidate is not None:
            return normalize_answer(candidate), strategy
    raise NoAnswerFound(f"no final answer found via {hint.value}")


def extract_final_answer(
    completion: str,
    hint: ExtractionStrategy = ExtractionStrategy.AUTO,
) -> AnswerValue:
    value, strategy = extract_with_strategy(completion, hint)
    logger.debug("extracted %s via %s", value, strategy.value)
    return value


# --------------------------------------------------------------------------
# equality and keys


def _as_float(a: AnswerValue) -> float | None:
    if a.kind is AnswerKind.DECIMAL:
        return a.decimal
    if a.kind is AnswerKind.RATIONAL:
        try:
            return float(a.rational)
        except OverflowError:
            return None
    return None


def answers_equal(a: AnswerValue, b: AnswerValue) -> bool:
    """Equivalence used for scoring and agreement.

    Rational pairs compare exactly. Any comparison involving a Decimal uses a
    relative tolerance of 1e-6. Symbolic compares by canonical string, and a
    Symbolic never equals a numeric value.
    """
    if a.kind is AnswerKind.SYMBOLIC or b.kind is AnswerKind.SYMBOLIC:
        if a.kind is b.kind:
            return a.symbolic == b.symbolic
        return False
    if a.kind is AnswerKind.RATIONAL and b.kind is AnswerKind.RATIONAL:
        return a.rational == b.rational
    x, y = _as_float(a), _as_float(b)
    if x is None or y is None:
        return False
    return math.isclose(x, y, rel_tol=DECIMAL_REL_TOL, abs_tol=0.0)


def canonical_key(a: AnswerValue) -> str:
    """Stable string key; a pure function of the parsed content, never of raw text.

    Decimal keys are quantized to 9 significant digits so that values within
    roughly 1e-9 relative of each other collapse to one key. Tolerance
    comparison stays the job of answers_equal; keys are the coarser bucket the
    interaction loop intersects.
    """
    if a.kind is AnswerKind.RATIONAL:
        f = a.rational
        return f"r:{f.numerator}/{f.denominator}"
    if a.kind is AnswerKind.DECIMAL:
        v = a.decimal
        if math.isnan(v):
            return "d:nan"
        if math.isinf(v):
            return "d:inf" if v > 0 else "d:-inf"
        if v == 0.0:
            v = 0.0  # collapse -0.0 into +0.0
        return f"d:{v:.8e}"
    return f"s:{a.symbolic}"


def render_answer(a: AnswerValue) -> str:
    """Short text form, chosen so normalize_answer(render_answer(a)) round-trips."""
    if a.kind is AnswerKind.RATIONAL:
        f = a.rational
        return str(f.numerator) if f.denominator == 1 else f"{f.numerator}/{f.denominator}"
    if a.kind is AnswerKind.DECIMAL:
        return repr(a.decimal)
    return a.symbolic


def answer_to_json(a: AnswerValue) -> dict:
    if a.kind is AnswerKind.RATIONAL:
        return {
            "kind": a.kind.value,
            "numerator": a.rational.numerator,
            "denominator": a.rational.denominator,
            "raw": a.raw,
        }
    if a.kind is AnswerKind.DECIMAL:
        return {"kind": a.kind.value, "value": a.decimal, "raw": a.raw}
    return {"kind": a.kind.value, "text": a.symbolic, "raw": a.raw}


def answer_from_json(obj: dict) -> AnswerValue:
    kind = AnswerKind(obj["kind"])
    raw = obj.get("raw", "")
    if kind is AnswerKind.RATIONAL:
        return AnswerValue(
            kind, raw=raw, rational=Fraction(int(obj["numerator"]), int(obj["denominator"]))
        )
    if kind is AnswerKind.DECIMAL:
        return AnswerValue(kind, raw=raw, decimal=float(obj["value"]))
    return AnswerValue(kind, raw=raw, symbolic=obj["text"])
