"""Species cohabitation priors.

A cohabitation matrix holds, for every pair of classes, how likely the two
are to grow within ``radius_m`` of each other. It is symmetric with a unit
diagonal; ``-1`` marks pairs for which no score is available. Before it can
steer pseudo-labelling the sentinels are resolved, the off-diagonal part is
damped by ``delta_scale`` and every row is normalized into a conditional
distribution (:class:`ScaledPrior`).

The matrix itself is obtained from an LLM: :func:`render_prompt` fills the
query template, :func:`fetch_matrix` posts it to a chat-completion endpoint
and :func:`extract_csv_section` / :func:`parse_matrix_csv` turn the reply
into a validated matrix.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import FormatError, TreeplError, ValidationError

logger = logging.getLogger(__name__)

MISSING = -1.0
SYMMETRY_TOL = 1e-9
CSV_MARKER = "===CSV==="
LATEX_MARKER = "===LATEX==="
TOKEN_ENV = "COHAB_LLM_TOKEN"


@dataclass(frozen=True, eq=False)
class CohabitationMatrix:
    species: tuple[str, ...]
    values: np.ndarray
    radius_m: float = 20.0

    def __post_init__(self):
        object.__setattr__(self, "species", tuple(self.species))
        v = np.array(self.values, dtype=np.float64)
        object.__setattr__(self, "values", v)
        validate_matrix(self.species, v)
        v.setflags(write=False)

    @property
    def n(self) -> int:
        return len(self.species)

    def index(self, name: str) -> int:
        try:
            return self.species.index(name)
        except ValueError:
            raise ValidationError(f"unknown species {name!r}") from None

    def has_missing(self) -> bool:
        return bool((self.values == MISSING).any())

    def __eq__(self, other):
        if not isinstance(other, CohabitationMatrix):
            return NotImplemented
        return self.species == other.species and np.array_equal(self.values, other.values)


def validate_matrix(species: Sequence[str], v: np.ndarray) -> None:
    c = len(species)
    if len(set(species)) != c:
        raise ValidationError("duplicate species names")
    if v.shape != (c, c):
        raise ValidationError(f"matrix shape {v.shape} does not match {c} species")
    problems = []
    if not np.all(np.isfinite(v)):
        problems.append("non-finite entries")
    bad_diag = [species[i] for i in range(c) if v[i, i] != 1.0]
    if bad_diag:
        problems.append(f"diagonal must be 1 for {bad_diag}")
    in_range = ((v >= 0) & (v <= 1)) | (v == MISSING)
    for i, j in zip(*np.nonzero(~in_range)):
        problems.append(f"value {float(v[i, j])!r} at ({species[i]},{species[j]}) outside [0,1] and not -1")
    asym = np.abs(v - v.T) > SYMMETRY_TOL
    for i, j in zip(*np.nonzero(np.triu(asym, 1))):
        problems.append(f"asymmetric pair ({species[i]},{species[j]}): {float(v[i, j])!r} vs {float(v[j, i])!r}")
    if problems:
        raise ValidationError("invalid cohabitation matrix: " + "; ".join(problems))


def _read_square_csv(text: str) -> tuple[list[str], np.ndarray]:
    rows = [r for r in csv.reader(io.StringIO(text.strip())) if any(cell.strip() for cell in r)]
    if not rows:
        raise FormatError("empty matrix CSV")
    header = [h.strip() for h in rows[0]]
    species = header[1:]
    body = rows[1:]
    if len(body) != len(species):
        raise FormatError(f"matrix CSV has {len(species)} columns but {len(body)} data rows")
    values = np.empty((len(species), len(species)))
    for i, row in enumerate(body):
        if len(row) != len(header):
            raise FormatError(f"ragged row {i + 1}: expected {len(header)} cells, got {len(row)}")
        if row[0].strip() != species[i]:
            raise FormatError(f"row label {row[0].strip()!r} does not match column {species[i]!r}")
        try:
            values[i] = [float(c) for c in row[1:]]
        except ValueError as exc:
            raise FormatError(f"row {species[i]!r}: {exc}") from None
    return species, values


def _write_square_csv(species: Sequence[str], values: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([""] + list(species))
    for name, row in zip(species, values):
        w.writerow([name] + [f"{v:.6f}" for v in row])
    return buf.getvalue()


def parse_matrix_csv(text: str, radius_m: float = 20.0) -> CohabitationMatrix:
    species, values = _read_square_csv(text)
    return CohabitationMatrix(species, values, radius_m)


def matrix_to_csv(m: CohabitationMatrix) -> str:
    return _write_square_csv(m.species, m.values)


def load_matrix(path, radius_m: float = 20.0) -> CohabitationMatrix:
    return parse_matrix_csv(Path(path).read_text(), radius_m)


def save_matrix(m: CohabitationMatrix, path) -> None:
    Path(path).write_text(matrix_to_csv(m))


# LLM round trip -------------------------------------------------------------


def extract_csv_section(reply: str) -> str:
    """Return the text between the CSV and LaTeX markers of an LLM reply."""
    text = reply.replace("\r\n", "\n").replace("\r", "\n")
    start = text.find(CSV_MARKER)
    end = text.find(LATEX_MARKER, start + len(CSV_MARKER)) if start >= 0 else -1
    if start < 0 or end < 0:
        excerpt = text[:200].replace("\n", " ")
        raise FormatError(f"reply lacks {CSV_MARKER} followed by {LATEX_MARKER}; starts with: {excerpt!r}")
    return text[start + len(CSV_MARKER) : end].strip()


@dataclass(frozen=True)
class PromptParams:
    species_list: tuple[str, ...]
    min_sources_per_pair: int = 2
    max_sources_per_pair: int = 4
    distance_m: float = 20
    region: str = "Central-Eastern Europe"
    additional_info: str = ""

    def __post_init__(self):
        object.__setattr__(self, "species_list", tuple(self.species_list))
        if self.min_sources_per_pair > self.max_sources_per_pair:
            raise ValidationError("min_sources_per_pair exceeds max_sources_per_pair")
        if not self.distance_m > 0:
            raise ValidationError("distance_m must be positive")


def prompt_template() -> str:
    return resources.files("treepl").joinpath("cohab_prompt.txt").read_text()


def _fmt_number(x) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def render_prompt(params: PromptParams) -> str:
    if not params.species_list:
        raise ValidationError("species list is empty")
    fills = {
        "{distance_m}": _fmt_number(params.distance_m),
        "{min_sources_per_pair}": str(params.min_sources_per_pair),
        "{max_sources_per_pair}": str(params.max_sources_per_pair),
        "{region}": params.region,
        "{additional environmental information}": params.additional_info or "none",
        "{species_list}": "\n".join(params.species_list),
    }
    text = prompt_template()
    for key, value in fills.items():
        text = text.replace(key, value)
    if "{" in text:
        raise ValidationError("prompt template has unfilled placeholders")
    return text


class LLMRequestError(TreeplError, OSError):
    exit_code = 3


_TRANSIENT = {408, 425, 429, 500, 502, 503, 504}


def _reply_text(body: bytes) -> str:
    try:
        payload = json.loads(body)
    except ValueError:
        return body.decode("utf-8")
    if isinstance(payload, dict):
        if "choices" in payload:
            return payload["choices"][0]["message"]["content"]
        if "content" in payload:
            return payload["content"]
    raise FormatError("unrecognised LLM response payload")


def fetch_matrix(
    params: PromptParams,
    endpoint: str,
    token: str | None = None,
    attempts: int = 3,
    model: str = "gpt-5",
    out_dir=None,
    backoff: float = 1.0,
    timeout: float = 600.0,
    sleep: Callable[[float], None] = time.sleep,
) -> CohabitationMatrix:
    """Query an LLM endpoint for a cohabitation matrix.

    The request is a chat-completion style JSON POST. Transient failures
    (connection errors, 408/425/429/5xx) are retried with exponential
    backoff, ``backoff * 2**k`` seconds. When ``out_dir`` is given the raw
    reply is written to ``raw_reply.txt`` and a ``fetch_log.json`` records
    attempts and retries; the reply is persisted before it is validated.
    """
    token = token if token is not None else os.environ.get(TOKEN_ENV)
    body = json.dumps(
        {"model": model, "messages": [{"role": "user", "content": render_prompt(params)}]}
    ).encode()
    headers = {"Content-Type": "application/json"}
    if token:
        headers["Authorization"] = f"Bearer {token}"
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    errors: list[str] = []
    raw = None
    for attempt in range(attempts):
        if attempt:
            sleep(backoff * 2 ** (attempt - 1))
        req = urllib.request.Request(endpoint, data=body, headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=timeout) as resp:
                raw = _reply_text(resp.read())
            break
        except urllib.error.HTTPError as exc:
            errors.append(f"HTTP {exc.code}")
            if exc.code not in _TRANSIENT:
                break
        except (urllib.error.URLError, TimeoutError, ConnectionError) as exc:
            errors.append(f"{type(exc).__name__}: {exc}")
        logger.warning("LLM request attempt %d failed: %s", attempt + 1, errors[-1])

    if out is not None:
        log = {"endpoint": endpoint, "model": model, "attempts": len(errors) + (raw is not None),
               "retries": len(errors) if raw is not None else max(len(errors) - 1, 0), "errors": errors}
        (out / "fetch_log.json").write_text(json.dumps(log, indent=2))
        if raw is not None:
            (out / "raw_reply.txt").write_text(raw)
    if raw is None:
        raise LLMRequestError(f"LLM request failed after {len(errors)} attempt(s): {errors}")
    m = parse_matrix_csv(extract_csv_section(raw), radius_m=float(params.distance_m))
    if out is not None:
        save_matrix(m, out / "matrix.csv")
    return m


# transformations --------------------------------------------------------------


@dataclass(frozen=True)
class ExpertDelta:
    species_i: str
    species_j: str
    delta: float

    def __post_init__(self):
        if not -1 <= self.delta <= 1:
            raise ValidationError(f"delta {self.delta} outside [-1, 1]")


def read_deltas(path) -> list[ExpertDelta]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    try:
        return [ExpertDelta(r["species_i"].strip(), r["species_j"].strip(), float(r["delta"])) for r in rows]
    except (KeyError, ValueError, AttributeError) as exc:
        raise FormatError(f"{path}: need columns species_i,species_j,delta ({exc!r})") from None


def apply_expert_deltas(m: CohabitationMatrix, deltas: Sequence[ExpertDelta]) -> CohabitationMatrix:
    """Add expert corrections symmetrically, clamping to [0, 1]."""
    v = m.values.copy()
    for d in deltas:
        i, j = m.index(d.species_i), m.index(d.species_j)
        if i == j:
            raise ValidationError(f"diagonal entry ({d.species_i}) cannot be adjusted")
        if v[i, j] == MISSING:
            raise ValidationError(f"cell ({d.species_i},{d.species_j}) is unavailable (-1); resolve it first")
        v[i, j] = v[j, i] = min(1.0, max(0.0, v[i, j] + d.delta))
    return CohabitationMatrix(m.species, v, m.radius_m)


def resolve_missing(m: CohabitationMatrix, value: float = 0.0) -> CohabitationMatrix:
    """Replace the -1 sentinel with ``value``."""
    if not 0 <= value <= 1:
        raise ValidationError("replacement for missing scores must lie in [0, 1]")
    v = np.where(m.values == MISSING, value, m.values)
    return CohabitationMatrix(m.species, v, m.radius_m)


def scale_offdiagonal(m: CohabitationMatrix, delta_scale: float = 0.75) -> CohabitationMatrix:
    if not 0 < delta_scale <= 1:
        raise ValidationError("delta_scale must lie in (0, 1]")
    if m.has_missing():
        raise ValidationError("matrix has unavailable (-1) entries; resolve them (e.g. missing_as=0) before scaling")
    v = m.values * delta_scale
    np.fill_diagonal(v, np.diag(m.values))
    return CohabitationMatrix(m.species, v, m.radius_m)


@dataclass(frozen=True, eq=False)
class ScaledPrior:
    """Row-stochastic conditional prior: row u is the class distribution of
    trees expected next to a tree of class u."""

    species: tuple[str, ...]
    pi: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "species", tuple(self.species))
        pi = np.array(self.pi, dtype=np.float64)
        if pi.shape != (len(self.species), len(self.species)):
            raise ValidationError("prior shape does not match species count")
        if (pi < 0).any() or np.abs(pi.sum(axis=1) - 1).max(initial=0) > 1e-9:
            raise ValidationError("prior rows must be non-negative and sum to 1")
        pi.setflags(write=False)
        object.__setattr__(self, "pi", pi)

    @classmethod
    def uniform(cls, species: Sequence[str]) -> "ScaledPrior":
        k = len(species)
        return cls(species, np.full((k, k), 1.0 / k))


def row_normalize(m: CohabitationMatrix) -> ScaledPrior:
    if m.has_missing():
        raise ValidationError("matrix has unavailable (-1) entries; resolve them before normalizing")
    v = m.values
    return ScaledPrior(m.species, v / v.sum(axis=1, keepdims=True))


def build_prior(m: CohabitationMatrix, delta_scale: float = 0.75, missing_as: float = 0.0) -> ScaledPrior:
    return row_normalize(scale_offdiagonal(resolve_missing(m, missing_as), delta_scale))


def prior_to_csv(p: ScaledPrior) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([""] + list(p.species))
    for name, row in zip(p.species, p.pi):
        w.writerow([name] + [repr(float(v)) for v in row])
    return buf.getvalue()


def parse_prior_csv(text: str) -> ScaledPrior:
    species, values = _read_square_csv(text)
    return ScaledPrior(species, values)
