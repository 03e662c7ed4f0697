"""Four-benchmark rubric scoring: validation, aggregation, report rendering.

A scoresheet holds one model's integer scores on the 0..5 scale for the
four benchmarks: image depiction (10 items), image sentiment analysis
(10), image content recognition (5), and multi-round dialogue image
understanding (2). The overall score is the mean of the four benchmark
averages. Averages are kept at full precision internally and rendered
half-up to one decimal; rendering goes through exact decimal arithmetic so
a printed average is never off by a rounding artifact.

Scoresheet files are JSON objects with keys ``model_name``, ``idc``,
``isac``, ``icrc``, ``mdiuc``; the optional ``reported_overall`` and
``notes`` fields let recorded score sets carry their own claims, which the
report checks against the recomputed values.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

BENCHMARKS = (("idc", 10), ("isac", 10), ("icrc", 5), ("mdiuc", 2))
SCORE_MIN, SCORE_MAX = 0, 5

_REQUIRED_KEYS = ("model_name", "idc", "isac", "icrc", "mdiuc")
_OPTIONAL_KEYS = ("reported_overall", "notes")

_DATA_DIR = Path(__file__).parent / "data"


class ScoreSheetError(ValueError):
    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("; ".join(violations))


@dataclass(frozen=True)
class ScoreSheet:
    model_name: str
    idc: tuple[int, ...]
    isac: tuple[int, ...]
    icrc: tuple[int, ...]
    mdiuc: tuple[int, ...]
    reported_overall: float | None = None
    notes: tuple[str, ...] = ()

    def benchmark(self, name: str) -> tuple[int, ...]:
        return getattr(self, name)


def scoresheet_violations(raw) -> list[str]:
    """Every schema violation in ``raw``, naming benchmark, index, and value."""
    if not isinstance(raw, dict):
        return [f"scoresheet must be a JSON object, got {type(raw).__name__}"]
    violations = []
    for key in _REQUIRED_KEYS:
        if key not in raw:
            violations.append(f"missing key {key!r}")
    for key in raw:
        if key not in _REQUIRED_KEYS and key not in _OPTIONAL_KEYS:
            violations.append(f"unknown key {key!r}")
    if "model_name" in raw and not isinstance(raw["model_name"], str):
        violations.append("model_name must be a string")
    for name, expected in BENCHMARKS:
        if name not in raw:
            continue
        scores = raw[name]
        if not isinstance(scores, list):
            violations.append(f"{name}: expected a list of scores")
            continue
        if len(scores) != expected:
            violations.append(f"{name}: expected {expected} items, got {len(scores)}")
        for i, s in enumerate(scores):
            if isinstance(s, bool) or not isinstance(s, int):
                violations.append(f"{name}[{i}]: {s!r} is not an integer")
            elif not SCORE_MIN <= s <= SCORE_MAX:
                violations.append(
                    f"{name}[{i}]: score {s} out of range {SCORE_MIN}..{SCORE_MAX}"
                )
    if "reported_overall" in raw and not isinstance(raw["reported_overall"], (int, float)):
        violations.append("reported_overall must be a number")
    if "notes" in raw and (not isinstance(raw["notes"], list)
                           or any(not isinstance(n, str) for n in raw["notes"])):
        violations.append("notes must be a list of strings")
    return violations


def validate_scoresheet(raw) -> ScoreSheet:
    violations = scoresheet_violations(raw)
    if violations:
        raise ScoreSheetError(violations)
    return ScoreSheet(
        model_name=raw["model_name"],
        idc=tuple(raw["idc"]),
        isac=tuple(raw["isac"]),
        icrc=tuple(raw["icrc"]),
        mdiuc=tuple(raw["mdiuc"]),
        reported_overall=raw.get("reported_overall"),
        notes=tuple(raw.get("notes", ())),
    )


def load_scoresheet(path) -> ScoreSheet:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ScoreSheetError([f"{path}: invalid JSON ({exc})"]) from None
    return validate_scoresheet(raw)


def reference_scoresheets() -> list[ScoreSheet]:
    """The five recorded score sets shipped with the package."""
    names = ("human", "git", "vilt", "minigpt4", "artgpt4")
    return [load_scoresheet(_DATA_DIR / f"{n}.json") for n in names]


def benchmark_average(scores) -> float:
    scores = list(scores)
    if not scores:
        raise ValueError("cannot average an empty score list")
    return sum(scores) / len(scores)


def overall_score(sheet: ScoreSheet) -> float:
    return sum(benchmark_average(sheet.benchmark(n)) for n, _ in BENCHMARKS) / len(BENCHMARKS)


def _exact_avg(total: int, count: int) -> Decimal:
    # count is always of the form 2^a * 5^b here, so the division terminates.
    return Decimal(total) / Decimal(count)


def render_decimal(value: Decimal) -> str:
    return str(value.quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


def sheet_averages(sheet: ScoreSheet) -> dict[str, Decimal]:
    """Exact benchmark averages plus the overall mean, keyed by benchmark."""
    out: dict[str, Decimal] = {}
    overall = Decimal(0)
    for name, _ in BENCHMARKS:
        avg = _exact_avg(sum(sheet.benchmark(name)), len(sheet.benchmark(name)))
        out[name] = avg
        overall += avg
    out["overall"] = overall / Decimal(len(BENCHMARKS))
    return out


@dataclass
class BenchmarkReport:
    sheets: list[ScoreSheet]
    averages: dict[str, dict[str, Decimal]]  # model -> benchmark/overall -> value
    notes: list[str] = field(default_factory=list)
    text: str = ""
    csv: str = ""


def _benchmark_table(sheets: list[ScoreSheet], name: str, n_items: int) -> list[str]:
    width = max(len(s.model_name) for s in sheets)
    width = max(width, len("model"))
    header = f"{'model':<{width}}  " + "  ".join(f"{i+1:>2}" for i in range(n_items))
    header += "  average"
    lines = [name.upper(), header]
    for s in sheets:
        scores = s.benchmark(name)
        row = f"{s.model_name:<{width}}  " + "  ".join(f"{v:>2}" for v in scores)
        row += f"  {render_decimal(_exact_avg(sum(scores), len(scores))):>7}"
        lines.append(row)
    lines.append("")
    return lines


def render_report(sheets: list[ScoreSheet]) -> BenchmarkReport:
    """Per-benchmark tables, the overall ranking, notes, and the CSV dump."""
    if not sheets:
        raise ValueError("render_report needs at least one scoresheet")
    names = [s.model_name for s in sheets]
    if len(set(names)) != len(names):
        dup = next(n for n in names if names.count(n) > 1)
        raise ValueError(f"duplicate model_name {dup!r}")

    averages = {s.model_name: sheet_averages(s) for s in sheets}
    notes: list[str] = []
    for s in sheets:
        recomputed = averages[s.model_name]["overall"]
        if s.reported_overall is not None:
            reported = Decimal(repr(s.reported_overall))
            if reported != recomputed:
                notes.append(
                    f"{s.model_name}: recomputed overall {recomputed} differs from "
                    f"the reported {reported}; this report uses the recomputed value."
                )
        notes.extend(s.notes)

    lines: list[str] = []
    for name, n_items in BENCHMARKS:
        lines.extend(_benchmark_table(sheets, name, n_items))
    width = max(max(len(n) for n in names), len("model"))
    lines.append("OVERALL (mean of the four benchmark averages)")
    lines.append(f"{'model':<{width}}  " + "  ".join(f"{b:>5}" for b, _ in BENCHMARKS)
                 + "  overall")
    for s in sheets:
        avgs = averages[s.model_name]
        row = f"{s.model_name:<{width}}  "
        row += "  ".join(f"{render_decimal(avgs[b]):>5}" for b, _ in BENCHMARKS)
        row += f"  {render_decimal(avgs['overall']):>7}"
        lines.append(row)
    if notes:
        lines.append("")
        lines.append("notes:")
        lines.extend(f"- {n}" for n in notes)
    text = "\n".join(lines) + "\n"

    csv_lines = ["model,benchmark,item,score"]
    for s in sheets:
        for name, _ in BENCHMARKS:
            for i, v in enumerate(s.benchmark(name), 1):
                csv_lines.append(f"{s.model_name},{name},{i},{v}")
    for s in sheets:
        avgs = averages[s.model_name]
        for name, _ in BENCHMARKS:
            csv_lines.append(f"{s.model_name},{name},average,{render_decimal(avgs[name])}")
        csv_lines.append(f"{s.model_name},overall,average,{render_decimal(avgs['overall'])}")
    csv = "\n".join(csv_lines) + "\n"

    return BenchmarkReport(sheets=sheets, averages=averages, notes=notes,
                           text=text, csv=csv)
