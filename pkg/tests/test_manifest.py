import pytest

from msfusion.manifest import COLUMNS, ManifestError, parse_manifest

HEADER = ",".join(COLUMNS)


def write(tmp_path, lines, files=("a.wav", "b.wav", "a.txt")):
    for f in files:
        (tmp_path / f).write_bytes(b"")
    p = tmp_path / "m.csv"
    p.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return p


def test_parses_valid_manifest(tmp_path):
    p = write(tmp_path, [HEADER, "a.wav,s1,u1,patient,30,a.txt", "b.wav,s2,u1,control,,"])
    m = parse_manifest(p)
    assert len(m) == 2 and m.speakers == ["s1", "s2"]
    assert m.rows[0].path == tmp_path / "a.wav" and m.rows[0].alignments == tmp_path / "a.txt"
    assert m.rows[1].severity is None and m.rows[1].alignments is None
    c = m.to_cohort()
    assert c.label_of() == {"s1": 1, "s2": -1} and c.severity_of() == {"s1": 30.0}


@pytest.mark.parametrize("row, match", [
    ("a.wav,s1,u1,sick,,", "label"),
    ("a.wav,s1,u1,patient,53,", r"outside \[0,52\]"),
    ("a.wav,s1,u1,patient,-1,", "outside"),
    ("a.wav,s1,u1,patient,high,", "not a number"),
    ("missing.wav,s1,u1,patient,,", "not found"),
    ("a.wav,s1,u1,patient,,missing.txt", "alignment file"),
    ("a.wav,,u1,patient,,", "non-empty"),
    ("a.wav,s1,u1,patient", "fields"),
])
def test_row_errors_name_the_row(tmp_path, row, match):
    p = write(tmp_path, [HEADER, "b.wav,s0,u0,control,,", row])
    with pytest.raises(ManifestError, match=match) as info:
        parse_manifest(p)
    assert info.value.row == 3 and str(info.value).startswith("row 3:")


def test_conflicting_labels_and_duplicates(tmp_path):
    p = write(tmp_path, [HEADER, "a.wav,s1,u1,patient,,", "b.wav,s1,u2,control,,"])
    with pytest.raises(ManifestError, match="already labelled"):
        parse_manifest(p)
    p = write(tmp_path, [HEADER, "a.wav,s1,u1,patient,,", "b.wav,s1,u1,patient,,"])
    with pytest.raises(ManifestError, match="duplicate"):
        parse_manifest(p)


def test_header_and_empty(tmp_path):
    p = write(tmp_path, ["path,speaker,label", "a.wav,s1,patient"])
    with pytest.raises(ManifestError, match="missing columns") as info:
        parse_manifest(p)
    assert info.value.row == 1
    with pytest.raises(ManifestError, match="no rows"):
        parse_manifest(write(tmp_path, [HEADER]))
    with pytest.raises(ManifestError, match="cannot read"):
        parse_manifest(tmp_path / "nope.csv")


def test_check_files_can_be_skipped(tmp_path):
    p = write(tmp_path, [HEADER, "ghost.wav,s1,u1,patient,,"], files=())
    assert parse_manifest(p, check_files=False).rows[0].path.name == "ghost.wav"
