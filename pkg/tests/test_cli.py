import json
import shutil

import pytest

from multiref.cli import EXIT_DATA, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from multiref.teacher import read_multiref

WORDS = ["apple", "berry", "cherry", "date"]

SMALL = {
    "corpus": {"dedup": False},
    "model": {"hidden_size": 64, "word_embedding_dim": 32, "latent_dim": 8, "floor_embedding_dim": 8,
              "dropout": 0.0, "init_range": 0.2, "max_decode_len": 8},
    "train": {"schedule": {"batch_size": 5, "max_steps": 300, "max_epochs": 200, "initial_lr": 0.002}},
    "teacher": {"name": "script", "script": "apple is number 0 ."},
}


def session(sid, *texts):
    floors = "AB"
    return {"session_id": sid, "utterances": [{"floor": floors[i % 2], "text": t} for i, t in enumerate(texts)]}


def write_jsonl(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records))
    return path


def memorizer_corpus(path):
    # every context recurs three times with one fixed answer
    return write_jsonl(path, [session(f"m{i}-{r}", f"tell me about {w}", f"{w} is number {i} .")
                              for r in range(3) for i, w in enumerate(WORDS)])


def snapshot(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def manifest(root):
    return json.loads((root / "manifest.json").read_text())


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    cfg = base / "cfg.json"
    cfg.write_text(json.dumps(SMALL))
    corpus = memorizer_corpus(base / "corpus.jsonl")
    return base, cfg, corpus


@pytest.fixture(scope="module")
def trained(workspace):
    base, cfg, corpus = workspace
    out = base / "gt"
    assert main(["preprocess", "--config", str(cfg), "--corpus", str(corpus), "--out", str(out)]) == EXIT_OK
    assert main(["train", "--config", str(cfg), "--out", str(out), "--mode", "gt"]) == EXIT_OK
    return out


def test_preprocess_hand_counts(tmp_path):
    records = [
        session("s1", "hi there", "hello"),
        session("s2", "how are you ?", "fine", "good"),
        session("s3", "hi there", "hello"),  # both utterances already seen: dropped
    ] + [session(f"x{i}", f"question {i}", f"answer {i}") for i in range(9)]
    corpus = write_jsonl(tmp_path / "c.jsonl", records)
    assert main(["preprocess", "--corpus", str(corpus), "--out", str(tmp_path / "e")]) == EXIT_OK
    m = manifest(tmp_path / "e")["preprocess"]
    assert m["sessions_read"] == 12 and m["sessions_kept"] == 11
    # 11 sessions: floor(1.1) = 1 for valid and test
    assert (m["train_sessions"], m["valid_sessions"], m["test_sessions"]) == (9, 1, 1)
    # ten two-utterance sessions and one three-utterance session
    assert m["train_pairs"] + m["valid_pairs"] + m["test_pairs"] == 12
    assert manifest(tmp_path / "e")["seed"] == 0
    assert m["config"]["corpus"]["path"] == str(corpus)


def test_preprocess_rerun_is_byte_identical(workspace, tmp_path):
    _, cfg, corpus = workspace
    args = ["preprocess", "--config", str(cfg), "--corpus", str(corpus), "--out", str(tmp_path / "e"), "--seed", "3"]
    assert main(args) == EXIT_OK
    first = snapshot(tmp_path / "e")
    assert main(args) == EXIT_OK
    assert snapshot(tmp_path / "e") == first


def test_preprocess_errors(tmp_path, capsys):
    (tmp_path / "empty.jsonl").write_text("")
    assert main(["preprocess", "--corpus", str(tmp_path / "empty.jsonl"), "--out", str(tmp_path / "e")]) == EXIT_DATA
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"session_id": "a"}\nnot json\n' + json.dumps(session("ok", "a", "b")) + "\n")
    assert main(["preprocess", "--corpus", str(bad), "--out", str(tmp_path / "e")]) == EXIT_DATA
    err = capsys.readouterr().err
    assert f"{bad}:1:" in err and f"{bad}:2:" in err
    assert main(["preprocess", "--out", str(tmp_path / "e")]) == EXIT_USAGE
    assert main(["preprocess", "--corpus", str(tmp_path / "missing.jsonl")]) == EXIT_DATA


def test_usage_errors(tmp_path):
    assert main([]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["train", "--config", str(tmp_path / "nope.json")]) == EXIT_USAGE


def test_gen_hyps_counts_and_golden(workspace, tmp_path):
    base, cfg, corpus = workspace
    out = tmp_path / "e"
    assert main(["preprocess", "--config", str(cfg), "--corpus", str(corpus), "--out", str(out)]) == EXIT_OK
    args = ["gen-hyps", "--config", str(cfg), "--out", str(out), "--n-refs", "5"]
    assert main(args) == EXIT_OK
    data = read_multiref(out / "hyps" / "hyps.jsonl")
    assert len(data) == 10
    assert sum(len(ex.references) for ex in data) == 50
    # the scripted teacher always says the same thing
    assert {r.utterance.text for ex in data for r in ex.references} == {"apple is number 0 ."}
    m = manifest(out)["gen-hyps"]
    assert (m["n"], m["p"], m["teacher"], m["hypotheses"]) == (5, 0.95, "script", 50)
    first = (out / "hyps" / "hyps.jsonl").read_bytes()
    assert main(args) == EXIT_OK
    assert (out / "hyps" / "hyps.jsonl").read_bytes() == first
    line = json.loads(first.decode().splitlines()[0])
    assert line["references"][0] == {"floor": "B", "source": "hypothesis", "text": "apple is number 0 .",
                                     "weight": 0.2}


def test_gen_hyps_teacher_unavailable(workspace, tmp_path):
    _, cfg, corpus = workspace
    out = tmp_path / "e"
    main(["preprocess", "--config", str(cfg), "--corpus", str(corpus), "--out", str(out)])
    assert main(["gen-hyps", "--out", str(out), "--teacher", "template",
                 "--teacher-path", str(tmp_path / "missing.json")]) == EXIT_RUNTIME
    assert main(["gen-hyps", "--out", str(out), "--teacher", "model",
                 "--teacher-path", str(tmp_path / "missing.pt")]) == EXIT_RUNTIME


def test_commands_need_preprocess(tmp_path):
    assert main(["gen-hyps", "--out", str(tmp_path / "e"), "--teacher", "uniform"]) == EXIT_DATA
    assert main(["train", "--out", str(tmp_path / "e")]) == EXIT_DATA


def test_train_gt_memorizes(trained):
    assert (trained / "ckpt" / "model.pt").exists()
    vals = [json.loads(line)["val_total"] for line in (trained / "ckpt" / "train_log.jsonl").read_text().splitlines()]
    assert len(vals) > 10
    assert all(b <= a for a, b in zip(vals, vals[1:]))
    m = manifest(trained)["train"]
    assert m["mode"] == "gt" and m["steps"] == 300


def test_evaluate_perfect_memorizer(trained, workspace):
    _, cfg, _ = workspace
    assert main(["evaluate", "--config", str(cfg), "--out", str(trained)]) == EXIT_OK
    report = json.loads((trained / "reports" / "metrics.json").read_text())
    row = report["rows"][0]
    assert row["bleu2"] == pytest.approx(100.0)
    assert set(row) == {"perplexity", "bleu2", "emb_extrema", "emb_average", "emb_greedy", "emb_uncovered",
                        "distinct_1", "distinct_2", "num_examples", "label", "avg_pi", "reval"}
    assert report["seed"] == 0 and report["split"] == "test"
    first = snapshot(trained / "reports")
    assert main(["evaluate", "--config", str(cfg), "--out", str(trained)]) == EXIT_OK
    assert snapshot(trained / "reports") == first


def test_evaluate_with_embeddings(trained, workspace, tmp_path):
    _, cfg, _ = workspace
    emb = tmp_path / "emb.txt"
    emb.write_text("apple 1 0\nis 0 1\nnumber 1 1\n")
    assert main(["evaluate", "--config", str(cfg), "--out", str(trained), "--embeddings", str(emb)]) == EXIT_OK
    row = json.loads((trained / "reports" / "metrics.json").read_text())["rows"][0]
    assert row["emb_average"] is not None
    assert main(["evaluate", "--out", str(trained), "--embeddings", str(tmp_path / "none.txt")]) == EXIT_DATA


def test_evaluate_missing_checkpoint(trained, tmp_path):
    assert main(["evaluate", "--out", str(trained), "--checkpoint", str(tmp_path / "x.pt")]) == EXIT_DATA


def test_analyze_latents_rejects_hred(trained):
    assert main(["analyze-latents", "--out", str(trained)]) == EXIT_USAGE
    assert main(["evaluate", "--out", str(trained), "--per-variable"]) == EXIT_USAGE


def test_train_hyp_single_reference(workspace, tmp_path):
    _, cfg, corpus = workspace
    out = tmp_path / "e"
    main(["preprocess", "--config", str(cfg), "--corpus", str(corpus), "--out", str(out)])
    main(["gen-hyps", "--config", str(cfg), "--out", str(out), "--n-refs", "3"])
    args = ["train", "--config", str(cfg), "--out", str(out), "--mode", "hyp", "--n-refs", "1"]
    assert main(args) == EXIT_OK
    m = manifest(out)["train"]
    # one hypothesis per pair: exactly one training instance per context
    assert (m["n_refs"], m["instances"]) == (1, 10)
    assert main(["train", "--config", str(cfg), "--out", str(out), "--mode", "mixed", "--n-refs", "2"]) == EXIT_OK
    assert manifest(out)["train"]["instances"] == 30


def test_train_resume_continues_steps(trained, workspace, tmp_path):
    _, cfg, _ = workspace
    out = tmp_path / "e"
    shutil.copytree(trained, out)
    sched = tmp_path / "s.json"
    sched.write_text(json.dumps({"max_steps": 350}))
    ckpt = str(out / "ckpt" / "model.pt")
    assert main(["train", "--config", str(cfg), "--out", str(out), "--schedule", str(sched), "--resume", ckpt]) == 0
    assert manifest(out)["train"]["steps"] == 350
    steps = [json.loads(line)["step"] for line in (out / "ckpt" / "train_log.jsonl").read_text().splitlines()]
    assert steps == sorted(steps) and steps[-1] == 350


def test_train_vocab_mismatch(trained, workspace, tmp_path):
    _, cfg, _ = workspace
    other = write_jsonl(tmp_path / "o.jsonl", [session(f"o{i}", f"zz {i}", f"yy {i}") for i in range(10)])
    out = tmp_path / "e"
    main(["preprocess", "--corpus", str(other), "--out", str(out)])
    args = ["train", "--config", str(cfg), "--out", str(out), "--resume", str(trained / "ckpt" / "model.pt")]
    assert main(args) == EXIT_USAGE
    assert main(["evaluate", "--out", str(out), "--checkpoint", str(trained / "ckpt" / "model.pt")]) == EXIT_USAGE


def test_bad_model_section(workspace, tmp_path):
    _, _, corpus = workspace
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"model": {"hidden_sise": 3}}))
    out = tmp_path / "e"
    main(["preprocess", "--corpus", str(corpus), "--out", str(out)])
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == EXIT_USAGE


def test_analyze_latents_lgm(workspace, tmp_path):
    _, cfg, corpus = workspace
    out = tmp_path / "e"
    main(["preprocess", "--config", str(cfg), "--corpus", str(corpus), "--out", str(out)])
    sched = tmp_path / "s.json"
    sched.write_text(json.dumps({"max_steps": 40}))
    assert main(["train", "--config", str(cfg), "--out", str(out), "--prior", "lgm", "--K", "3",
                 "--schedule", str(sched)]) == EXIT_OK
    assert main(["analyze-latents", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    rows = json.loads((out / "reports" / "per_variable.json").read_text())["rows"]
    assert [r["label"] for r in rows] == ["0", "1", "2", "mix"]
    assert sum(r["avg_pi"] for r in rows[:3]) == pytest.approx(1.0, abs=1e-6)
    assert rows[3]["avg_pi"] == pytest.approx(1.0, abs=1e-6)
    assert "analyze-latents" in manifest(out)
    assert (out / "reports" / "per_variable.txt").read_text().count("\n") >= 4
