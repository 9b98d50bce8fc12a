import numpy as np
import pytest

from rootsr.imaging import (
    DatasetManifest,
    GrayImage,
    ManifestEntry,
    combine_manifests,
    make_synthetic_dataset,
    save_image,
)


@pytest.fixture(scope="session")
def roots64(tmp_path_factory):
    """Ten 64x64 synthetic root images with masks."""
    return make_synthetic_dataset(10, 64, 64, 11, tmp_path_factory.mktemp("roots64"))


@pytest.fixture(scope="session")
def three_sets(tmp_path_factory):
    parts = []
    for k, kind in enumerate(["roots", "texture", "roots"]):
        m = make_synthetic_dataset(4 + k, 64, 64, 100 + k, tmp_path_factory.mktemp(f"set{k}"),
                                   kind=kind)
        parts.append((f"set{k}", m))
    return combine_manifests(parts)


@pytest.fixture(scope="session")
def constant_set(tmp_path_factory):
    out = tmp_path_factory.mktemp("const")
    entries = []
    for i in range(6):
        path = out / f"c{i}.pgm"
        save_image(GrayImage(np.full((64, 64), 0.5, np.float32)), path)
        entries.append(ManifestEntry(path, 0))
    return DatasetManifest(entries, {0: "constant"})


# acceptance verdict lines, printed together at the end of the session
_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    def record(criterion: int, passed: bool, detail: str) -> bool:
        line = f"criterion {criterion:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        _VERDICTS.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
