"""CSV manifest: one row per recording."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

from .evaluation import LABELS, SEVERITY_RANGE, Cohort, CohortEntry

COLUMNS = ("path", "speaker", "utterance", "label", "severity", "alignments")


class ManifestError(ValueError):
    def __init__(self, message, row=None):
        self.row = row
        super().__init__(f"row {row}: {message}" if row is not None else message)


@dataclass(frozen=True)
class ManifestRow:
    path: Path
    speaker_id: str
    utterance_id: str
    label: str
    severity: float | None = None
    alignments: Path | None = None


@dataclass
class Manifest:
    rows: list
    source: Path | None = None

    def __len__(self):
        return len(self.rows)

    @property
    def speakers(self) -> list:
        return sorted({r.speaker_id for r in self.rows})

    def to_cohort(self) -> Cohort:
        return Cohort([CohortEntry(r.speaker_id, r.utterance_id, r.label, r.severity, str(r.path))
                       for r in self.rows])


def parse_manifest(path, check_files: bool = True) -> Manifest:
    """Read and validate a manifest; relative paths resolve against its directory.

    Row numbers in error messages count the header as row 1.
    """
    path = Path(path)
    base = path.parent
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    except UnicodeDecodeError as exc:
        raise ManifestError(f"manifest {path} is not UTF-8") from exc
    reader = csv.DictReader(text.splitlines())
    header = reader.fieldnames or []
    missing = [c for c in COLUMNS if c not in header]
    if missing:
        raise ManifestError(f"missing columns {missing}; expected header {','.join(COLUMNS)}", row=1)
    rows, seen = [], {}
    labels = {}
    for lineno, rec in enumerate(reader, start=2):
        if None in rec or any(v is None for v in rec.values()):
            raise ManifestError("wrong number of fields", lineno)
        spk, utt = rec["speaker"].strip(), rec["utterance"].strip()
        if not spk or not utt:
            raise ManifestError("speaker and utterance must be non-empty", lineno)
        label = rec["label"].strip()
        if label not in LABELS:
            raise ManifestError(f"label {label!r} must be one of {sorted(LABELS)}", lineno)
        if labels.setdefault(spk, label) != label:
            raise ManifestError(f"speaker {spk} already labelled {labels[spk]}", lineno)
        sev_txt = rec["severity"].strip()
        severity = None
        if sev_txt:
            try:
                severity = float(sev_txt)
            except ValueError:
                raise ManifestError(f"severity {sev_txt!r} is not a number", lineno) from None
            lo, hi = SEVERITY_RANGE
            if not lo <= severity <= hi:
                raise ManifestError(f"severity {severity:g} outside [{lo:g},{hi:g}]", lineno)
        key = (spk, utt)
        if key in seen:
            raise ManifestError(f"duplicate speaker/utterance pair {key} (first on row {seen[key]})", lineno)
        seen[key] = lineno
        audio = base / rec["path"].strip()
        ali_txt = rec["alignments"].strip()
        ali = base / ali_txt if ali_txt else None
        if check_files:
            if not audio.is_file():
                raise ManifestError(f"audio file {audio} not found", lineno)
            if ali is not None and not ali.is_file():
                raise ManifestError(f"alignment file {ali} not found", lineno)
        rows.append(ManifestRow(audio, spk, utt, label, severity, ali))
    if not rows:
        raise ManifestError("manifest has no rows")
    return Manifest(rows, path)
