import pytest

from langadapt.cli import main
from langadapt.evaluation import write_nli_tsv
from langadapt.experiment import GRID_COLUMNS

# strategy, embeddings, reduction; at d=64 reductions 32 and 64 stand in for 48 and 384
STRATEGY_GRID = [
    ("row5", "emb-only", "wte,wpe", 16),
    ("row6", "emb-then-adpt", "wte,wpe", 16),
    ("row7", "emb-and-adpt", "wte", 16),
    ("row8", "emb-and-adpt", "wte", 32),
    ("row9", "emb-and-adpt", "wte", 64),
]


@pytest.mark.slow
def test_strategy_grid_at_desk_scale(desk_pretrained, tmp_path, capsys):
    suite, pre, _ = desk_pretrained
    step, base = pre.checkpoints[-1]
    paths = suite.write(tmp_path / "data")
    # smaller evaluation splits keep five full runs within a few minutes
    write_nli_tsv(paths["a_train.tsv"], suite.train_a[:300])
    write_nli_tsv(paths["b_train.tsv"], suite.train_b[:300])
    write_nli_tsv(paths["b_test.tsv"], suite.test_b[:150])

    names = []
    for run_id, strategy, emb, red in STRATEGY_GRID:
        text = (
            f"[run]\nid = {run_id}\nseed = 0\n"
            f"[data]\nbase = {base}\nvocab = data/b.bpe\ncorpus = data/b.txt\n"
            "target_train = data/b_train.tsv\ntarget_test = data/b_test.tsv\n"
            "source_train = data/a_train.tsv\ntemplate = data/b_template.txt\n"
            f"[strategy]\nname = {strategy}\nembeddings = {emb}\nreduction = {red}\n"
        )
        (tmp_path / f"{run_id}.cfg").write_text(text, encoding="utf-8")
        names.append(f"{run_id}.cfg")
    (tmp_path / "grid.txt").write_text("\n".join(names) + "\n", encoding="utf-8")

    code = main(["grid", "--grid", str(tmp_path / "grid.txt"), "--runs-dir", str(tmp_path / "runs")])
    out = capsys.readouterr().out
    assert code == 0
    lines = out.strip().splitlines()
    assert lines[0].split("\t") == list(GRID_COLUMNS)
    rows = [line.split("\t") for line in lines[1:]]
    assert len(rows) == 5
    assert [r[1] for r in rows] == ["Emb", "Emb->Adpt", "Emb+Adpt", "Emb+Adpt", "Emb+Adpt"]
    assert {r[2] for r in rows} == {str(step)}
    assert [r[3] for r in rows] == ["wte,wpe", "wte,wpe", "wte", "wte", "wte"]
    assert [r[4] for r in rows] == ["-", "16", "16", "32", "64"]
    for r in rows:
        metrics = [float(x) for x in r[5:]]
        assert len(metrics) == 3 and all(0.0 <= m <= 1.0 for m in metrics)
    with capsys.disabled():
        print("\n" + out)
