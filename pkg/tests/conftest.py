import numpy as np
import pytest

from egorec import io


def write_tsv(path, rows):
    path.write_text("".join("\t".join(map(str, r)) + "\n" for r in rows), encoding="utf-8")
    return path


def random_bipartite(rng, n_users, n_items, density=0.35):
    """Random train lists where every user and item has at least one edge."""
    dense = rng.random((n_users, n_items)) < density
    for u in range(n_users):
        dense[u, rng.integers(n_items)] = True
    for i in range(n_items):
        dense[rng.integers(n_users), i] = True
    return [sorted(np.flatnonzero(row).tolist()) for row in dense], dense.astype(float)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def toy_raw_dir(tmp_path):
    """A small interaction file with a dense 5-core block plus a sparse fringe."""
    rng = np.random.default_rng(7)
    rows = []
    for u in range(12):
        for i in range(10):
            if rng.random() < 0.7 or (u + i) % 3 == 0:
                rows.append((f"user{u}", f"item{i}", 5, 1_600_000_000 + u * 100 + i))
    rows += [("loner", "item0", 3, 1_600_000_500), ("user0", "rare_item", 1, 1_600_000_600)]
    write_tsv(tmp_path / "inter.tsv", [("user_id", "item_id", "rating", "timestamp")] + rows)
    items = sorted({r[1] for r in rows})
    for m, dim in (("v", 6), ("t", 4)):
        feats = rng.normal(size=(len(items), dim))
        io.write_matrix(tmp_path / f"{m}.mmft", feats, items)
    return tmp_path


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance():
    def record(number, title, passed, detail=""):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title}"
        if detail:
            line += f" ({detail})"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
