"""Parsing and indexing of long-format longitudinal multiple-membership data.

One input row is one (student, year) record carrying an optional teacher link
and an optional score.  :func:`build_dataset` turns a list of records into an
immutable :class:`LongitudinalDataset` holding the response vector (sorted by
student, then year), per-year teacher rosters, the teacher link table and the
observed-test-score (OTS) pattern of every student.
"""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence, TextIO

import numpy as np

from .errors import ConfigError, DimensionError, ParseError, ValidationError

MISSING_TOKENS = frozenset({"", "NA"})


@dataclass(frozen=True)
class ObservationRecord:
    student: str
    year: int
    teacher: str | None = None
    score: float | None = None
    covariates: tuple[float, ...] = ()


@dataclass(frozen=True)
class Schema:
    """Column mapping from a delimited file to record fields."""

    student: str = "student"
    year: str = "year"
    teacher: str = "teacher"
    score: str = "score"
    covariates: tuple[str, ...] = ()


def _cell(row: Sequence[str], idx: int) -> str | None:
    value = row[idx].strip()
    return None if value in MISSING_TOKENS else value


def parse_records(
    source: TextIO | str | Iterable[str],
    schema: Schema | None = None,
    delimiter: str = ",",
) -> list[ObservationRecord]:
    """Read delimiter-separated text with a header row into records.

    ``source`` may be an open text stream, a string holding the whole table,
    or any iterable of lines.  Empty cells and ``NA`` are missing values.
    Row numbers in errors count the header as row 1.
    """
    schema = schema or Schema()
    if isinstance(source, str):
        source = io.StringIO(source)
    reader = csv.reader(source, delimiter=delimiter)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise ParseError("empty input, header row required") from None

    def column(name: str) -> int:
        try:
            return header.index(name)
        except ValueError:
            raise ConfigError(f"column {name!r} not found in header {header}") from None

    i_stu = column(schema.student)
    i_year = column(schema.year)
    i_tch = column(schema.teacher)
    i_score = column(schema.score)
    i_cov = [column(c) for c in schema.covariates]

    records = []
    for rownum, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(row)}", rownum)
        student = _cell(row, i_stu)
        if student is None:
            raise ParseError("missing student identifier", rownum)
        year_txt = _cell(row, i_year)
        if year_txt is None:
            raise ParseError("missing year", rownum)
        try:
            year = int(year_txt)
        except ValueError:
            raise ParseError(f"year {year_txt!r} is not an integer", rownum) from None
        score_txt = _cell(row, i_score)
        score = None
        if score_txt is not None:
            try:
                score = float(score_txt)
            except ValueError:
                raise ParseError(f"score {score_txt!r} is not numeric", rownum) from None
            if not math.isfinite(score):
                raise ParseError(f"score {score_txt!r} is not finite", rownum)
        covs = []
        for j in i_cov:
            txt = _cell(row, j)
            if txt is None:
                covs.append(math.nan)
                continue
            try:
                covs.append(float(txt))
            except ValueError:
                raise ParseError(f"covariate {header[j]!r}={txt!r} is not numeric", rownum) from None
        records.append(
            ObservationRecord(student, year, _cell(row, i_tch), score, tuple(covs))
        )
    return records


def ots_pattern(indicators: Sequence[int]) -> int:
    """Base-2 value of an observed-score indicator vector, year 1 most significant.

    >>> ots_pattern([1, 0, 1])
    5
    """
    value = 0
    for b in indicators:
        if b not in (0, 1, True, False):
            raise ValidationError(f"OTS indicators must be 0/1, got {b!r}")
        value = (value << 1) | int(b)
    if value == 0:
        raise ValidationError("student has no observed score (all-zero OTS indicators)")
    return value


def pattern_years(pattern: int, T: int) -> tuple[int, ...]:
    """Inverse of :func:`ots_pattern`: the observed years (1-based) of a pattern."""
    return tuple(g for g in range(1, T + 1) if pattern >> (T - g) & 1)


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class LongitudinalDataset:
    """Validated, indexed longitudinal data.

    Scored observations are stored in student-then-year order.  ``links[i, g-1]``
    is the roster index of student i's year-g teacher, or -1 when the link is
    missing.  Arrays are read-only.
    """

    T: int
    student_ids: tuple[str, ...]
    rosters: tuple[tuple[str, ...], ...]
    obs_student: np.ndarray
    obs_year: np.ndarray
    y: np.ndarray
    covariates: np.ndarray
    links: np.ndarray
    records: tuple[ObservationRecord, ...] = field(repr=False)
    covariate_names: tuple[str, ...] = ()

    @property
    def n(self) -> int:
        return len(self.student_ids)

    @property
    def n_obs(self) -> int:
        return len(self.y)

    @property
    def m(self) -> tuple[int, ...]:
        """Teachers per year, m_1..m_T."""
        return tuple(len(r) for r in self.rosters)

    @cached_property
    def student_start(self) -> np.ndarray:
        """Offsets of each student's first row in y; length n + 1."""
        counts = np.bincount(self.obs_student, minlength=self.n)
        return _readonly(np.concatenate([[0], np.cumsum(counts)]))

    @cached_property
    def obs_years(self) -> tuple[frozenset[int], ...]:
        out = [set() for _ in range(self.n)]
        for i, g in zip(self.obs_student, self.obs_year):
            out[i].add(int(g))
        return tuple(frozenset(s) for s in out)

    @cached_property
    def year_members(self) -> tuple[np.ndarray, ...]:
        return tuple(
            _readonly(self.obs_student[self.obs_year == g].copy()) for g in range(1, self.T + 1)
        )

    @property
    def n_g(self) -> tuple[int, ...]:
        return tuple(len(b) for b in self.year_members)

    @cached_property
    def ots(self) -> np.ndarray:
        bits = np.zeros(self.n, dtype=np.int64)
        np.add.at(bits, self.obs_student, 1 << (self.T - self.obs_year))
        return _readonly(bits)

    @cached_property
    def pattern_members(self) -> dict[int, np.ndarray]:
        groups = defaultdict(list)
        for i, p in enumerate(self.ots):
            groups[int(p)].append(i)
        return {p: _readonly(np.array(v, dtype=np.int64)) for p, v in sorted(groups.items())}

    @property
    def pattern_counts(self) -> dict[int, int]:
        return {p: len(v) for p, v in self.pattern_members.items()}

    def teacher_of(self, student: int, year: int) -> str | None:
        j = self.links[student, year - 1]
        return None if j < 0 else self.rosters[year - 1][j]


def build_dataset(
    records: Iterable[ObservationRecord],
    T: int | None = None,
    covariate_names: Sequence[str] | None = None,
) -> LongitudinalDataset:
    """Validate and index records.

    Rows missing both score and teacher are dropped, then students without any
    scored year.  Link-only rows (teacher, no score) are kept: they place the
    student in that teacher's roster, which feeds the teacher's future-year
    effects, but add nothing to ``y``.  ``T`` defaults to the largest year seen.
    """
    records = list(records)
    if not records:
        raise ValidationError("no records")
    max_year = max(r.year for r in records)
    if T is None:
        T = max_year
    if T < 1:
        raise DimensionError(f"T must be >= 1, got {T}")
    if max_year > T:
        raise DimensionError(f"T={T} is smaller than the largest observed year {max_year}")
    if min(r.year for r in records) < 1:
        raise ValidationError("years must be >= 1")
    if not any(r.score is not None for r in records):
        raise ValidationError("no record has a score")

    kept = [r for r in records if not (r.score is None and r.teacher is None)]
    ncov = {len(r.covariates) for r in kept}
    if len(ncov) > 1:
        raise ValidationError(f"records carry differing covariate counts {sorted(ncov)}")

    seen = set()
    scored_students = set()
    for r in kept:
        key = (r.student, r.year)
        if key in seen:
            raise ValidationError(f"duplicate record for student {r.student!r} in year {r.year}")
        seen.add(key)
        if r.score is not None:
            scored_students.add(r.student)
            if any(math.isnan(c) for c in r.covariates):
                raise ValidationError(
                    f"missing covariate on scored record ({r.student!r}, year {r.year})"
                )

    kept = sorted((r for r in kept if r.student in scored_students), key=lambda r: (r.student, r.year))
    student_ids = tuple(sorted(scored_students))
    sidx = {s: i for i, s in enumerate(student_ids)}
    rosters = tuple(
        tuple(sorted({r.teacher for r in kept if r.year == g and r.teacher is not None}))
        for g in range(1, T + 1)
    )
    tidx = [{t: j for j, t in enumerate(roster)} for roster in rosters]

    links = np.full((len(student_ids), T), -1, dtype=np.int64)
    obs_student, obs_year, y, covs = [], [], [], []
    for r in kept:
        i = sidx[r.student]
        if r.teacher is not None:
            links[i, r.year - 1] = tidx[r.year - 1][r.teacher]
        if r.score is not None:
            obs_student.append(i)
            obs_year.append(r.year)
            y.append(r.score)
            covs.append(r.covariates)

    p = ncov.pop() if ncov else 0
    if covariate_names is None:
        covariate_names = tuple(f"x{k + 1}" for k in range(p))
    elif len(covariate_names) != p:
        raise ValidationError(f"{len(covariate_names)} covariate names for {p} covariates")
    return LongitudinalDataset(
        T=T,
        student_ids=student_ids,
        rosters=rosters,
        obs_student=_readonly(np.array(obs_student, dtype=np.int64)),
        obs_year=_readonly(np.array(obs_year, dtype=np.int64)),
        y=_readonly(np.array(y, dtype=float)),
        covariates=_readonly(np.array(covs, dtype=float).reshape(len(y), p)),
        links=_readonly(links),
        records=tuple(kept),
        covariate_names=tuple(covariate_names),
    )


def write_records(records: Iterable[ObservationRecord], stream: TextIO, schema: Schema | None = None):
    """Write records in the format :func:`parse_records` reads."""
    schema = schema or Schema()
    w = csv.writer(stream, lineterminator="\n")
    w.writerow([schema.student, schema.year, schema.teacher, schema.score, *schema.covariates])
    for r in records:
        w.writerow(
            [
                r.student,
                r.year,
                "" if r.teacher is None else r.teacher,
                "" if r.score is None else repr(float(r.score)),
                *(repr(float(c)) for c in r.covariates),
            ]
        )
