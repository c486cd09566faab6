"""A small end-to-end command chain shared by the CLI and acceptance tests."""
from safer.cli import main

TINY = """
[run]
seed = 4
[cohort]
n_survivors = 50
n_deceased = 20
d_struct = 6
d_note = 4
seq_len = 4
[teacher]
d_k = 8
epochs = 2
[student]
epochs = 3
[finetune]
rounds = 2
[outcome]
epochs = 2
d_h = 4
[conformal]
replicates = 10
alphas = 0.1:0.5:0.2
"""


def run_chain(d, monkeypatch):
    monkeypatch.chdir(d)
    (d / "c.cfg").write_text(TINY)
    steps = [
        ["gen", "--out", "cohort.jsonl"],
        ["split", "--cohort", "cohort.jsonl", "--out-dir", "sp"],
        ["train", "--train", "sp/train.jsonl", "--out", "t.ckpt", "--log", "tlog.csv"],
        ["student", "--teacher", "t.ckpt", "--train", "sp/train.jsonl", "--out", "s.ckpt"],
        ["finetune", "--teacher", "t.ckpt", "--student", "s.ckpt", "--train", "sp/train.jsonl",
         "--out", "f.ckpt", "--uncertainty", "u.csv"],
        ["calibrate", "--teacher", "f.ckpt", "--student", "s.ckpt", "--train", "sp/train.jsonl",
         "--cal", "sp/cal.jsonl", "--test", "sp/test.jsonl", "--out", "scores.csv"],
        ["select", "--scores", "scores.csv", "--out", "sel.csv", "--alpha", "0.5"],
        ["sweep", "--scores", "scores.csv", "--cs", "0.2,0.4", "--reps", "8", "--threads", "2",
         "--out", "sweep.csv"],
        ["eval", "--teacher", "f.ckpt", "--cohort", "sp/test.jsonl", "--outcome-train",
         "sp/train.jsonl", "--out", "m.json", "--csv", "m.csv"],
        ["case-study", "--teacher", "f.ckpt", "--student", "s.ckpt", "--survivors", "3",
         "--deceased", "3", "--out", "cs.csv"],
    ]
    for argv in steps:
        assert main([argv[0], "--config", "c.cfg", *argv[1:]]) == 0, argv
    return ["cohort.jsonl", "sp/train.jsonl", "sp/cal.jsonl", "sp/test.jsonl", "tlog.csv",
            "u.csv", "scores.csv", "sel.csv", "sweep.csv", "m.json", "m.csv", "cs.csv",
            "t.ckpt", "s.ckpt", "f.ckpt"]
