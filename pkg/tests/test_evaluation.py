import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from langadapt.adapters import AdapterConfig, inject_adapters
from langadapt.errors import ConfigurationError, ContractError, DataError
from langadapt.evaluation import (
    LABELS,
    NLIExample,
    PromptTemplate,
    TargetArtifacts,
    TaskHyper,
    builtin_template,
    capacity_report,
    classify_logits,
    cross_lingual_eval,
    evaluate_accuracy,
    format_results,
    new_task_head,
    pair_ids,
    predict_classes,
    predict_from_scores,
    read_nli_tsv,
    render_prompt,
    train_task_head,
    write_nli_tsv,
    zero_shot_eval,
    zero_shot_predict,
)
from langadapt.model import ModelConfig, build_model, checksum, forward_logits
from langadapt.numcore import no_grad
from langadapt.synthetic import make_language, nli_dataset
from langadapt.tokenizer import PAD, BpeVocab, train_bpe

EX = NLIExample("P", "H", "entailment")
SMALL = ModelConfig(n_layers=2, n_heads=2, d_model=16, d_ffn=32, vocab_size=300, max_positions=128, seed=8)


def brute_force_scores(params, adapters, vocab, template, ex):
    """Re-run the model on every prefix and read off one log-prob at a time."""
    scores = {}
    for lab in LABELS:
        ids = vocab.encode(render_prompt(template, ex, lab))
        lps = []
        for t in range(1, len(ids)):
            with no_grad():
                z = forward_logits(params, adapters, np.array([ids[:t]])).data[0, -1].astype(np.float64)
            lps.append(z[ids[t]] - (z.max() + math.log(np.exp(z - z.max()).sum())))
        scores[lab] = sum(lps) / len(lps)
    best = max(LABELS, key=lambda lab: (scores[lab], -LABELS.index(lab)))
    return best, scores


# --- templates ----------------------------------------------------------------------


def test_builtin_template_renders_exactly():
    assert render_prompt(builtin_template("en"), EX, "entailment") == "P, right? Yes, H"
    assert render_prompt(builtin_template("de"), EX, "contradiction") == "P, richtig? Nein, H"
    assert render_prompt(builtin_template("ko"), EX, "neutral") == "P, 맞지? 또한, H"
    ko = builtin_template("ko").verbalizers
    assert ko == {"entailment": "예", "contradiction": "아니요", "neutral": "또한"}


@pytest.mark.parametrize("lang", ["en", "de", "ko"])
def test_labels_differ_only_at_verbalizer(lang):
    t = builtin_template(lang)
    texts = [render_prompt(t, EX, lab) for lab in LABELS]
    for lab, text in zip(LABELS, texts):
        assert text.replace(t.verbalizers[lab], "<V>", 1) == t.pattern.replace("[premise]", "P").replace(
            "[hypothesis]", "H"
        ).replace("[MASK]", "<V>")


def test_slot_text_inside_example_is_literal():
    ex = NLIExample("a [hypothesis] b", "c [MASK]", "neutral")
    assert render_prompt(builtin_template("en"), ex, "neutral") == "a [hypothesis] b, right? Also, c [MASK]"


@pytest.mark.parametrize(
    "pattern", ["[premise] [MASK]", "[premise] [MASK] [MASK] [hypothesis]", "no slots"]
)
def test_missing_slot_rejected(pattern):
    with pytest.raises(ConfigurationError):
        PromptTemplate(pattern, {"entailment": "y", "contradiction": "n", "neutral": "a"})


def test_empty_verbalizer_rejected():
    with pytest.raises(ConfigurationError):
        PromptTemplate("[premise] [MASK] [hypothesis]", {"entailment": "y", "contradiction": "", "neutral": "a"})


def test_template_file_roundtrip(tmp_path):
    t = builtin_template("de")
    (tmp_path / "t.txt").write_text(t.to_text(), encoding="utf-8")
    assert PromptTemplate.load(tmp_path / "t.txt") == t


def test_bad_example_rejected():
    with pytest.raises(DataError):
        NLIExample("", "h", "neutral")
    with pytest.raises(DataError):
        NLIExample("p", "h", "maybe")


# --- zero-shot -------------------------------------------------------------------------


def test_argmax_and_tie_break():
    assert predict_from_scores({"entailment": -1.2, "contradiction": -3.4, "neutral": -2.2}) == "entailment"
    assert predict_from_scores({"entailment": -2.0, "contradiction": -1.0, "neutral": -1.0}) == "contradiction"
    assert predict_from_scores(dict.fromkeys(LABELS, 0.0)) == "entailment"


@given(st.lists(st.floats(-50, 0), min_size=3, max_size=3), st.floats(-100, 100))
def test_argmax_invariant_to_shift(scores, c):
    s = dict(zip(LABELS, scores))
    shifted = {k: v + c for k, v in s.items()}
    # shifting can merge near-ties through rounding; compare only clear winners
    top = sorted(scores)
    if top[-1] - top[-2] > 1e-9 * (1 + abs(c)):
        assert predict_from_scores(s) == predict_from_scores(shifted)


@pytest.fixture(scope="module")
def lm():
    lang = make_language("x", 5)
    data = nli_dataset(lang, 50, 6)
    vocab = train_bpe([ex.premise + ex.hypothesis for ex in data], 300)
    params = build_model(SMALL)
    return params, vocab, lang.template(), data


def test_uniform_model_predicts_tie_label(lm):
    params, vocab, template, data = lm
    rigged = params.copy()
    rigged.wte.data[:] = 0
    for ex in data[:10]:
        label, scores = zero_shot_predict(rigged, None, vocab, template, ex)
        assert label == "entailment"
        assert len(set(scores.values())) == 1


def test_matches_brute_force_oracle(lm):
    params, vocab, template, data = lm
    for ex in data[:8]:
        label, scores = zero_shot_predict(params, None, vocab, template, ex)
        ref_label, ref = brute_force_scores(params, None, vocab, template, ex)
        assert label == ref_label
        for lab in LABELS:
            assert abs(scores[lab] - ref[lab]) < 1e-6


def test_verbalizer_scoring_mode(lm):
    params, vocab, template, data = lm
    label, scores = zero_shot_predict(params, None, vocab, template, data[0], scoring="verbalizer")
    assert label in LABELS and all(s < 0 for s in scores.values())
    with pytest.raises(ConfigurationError):
        zero_shot_predict(params, None, vocab, template, data[0], scoring="bogus")


def test_zero_shot_with_adapters_matches_without_at_init(lm):
    params, vocab, template, data = lm
    p = params.copy()
    bank = inject_adapters(p, AdapterConfig(4), 0)
    assert zero_shot_eval(p, bank, vocab, template, data[:5]) == zero_shot_eval(params, None, vocab, template, data[:5])


# --- task head ------------------------------------------------------------------------


def test_head_shapes_and_names():
    head = new_task_head(16, 2, reduction=4)
    assert head.tensors["cls.w"].shape == (16, 3) and head.tensors["cls.b"].shape == (3,)
    assert head.tensors["layer1.task.down"].shape == (16, 4)


def test_head_logits_shape(lm):
    params, vocab, _, data = lm
    head = new_task_head(16, 2, 4)
    seqs = [pair_ids(vocab, ex, 64) for ex in data[:3]]
    T = max(map(len, seqs))
    ids = np.array([s + [0] * (T - len(s)) for s in seqs])
    out = classify_logits(params, None, head, ids, np.array([len(s) - 1 for s in seqs]))
    assert out.shape == (3, 3)


def test_head_dimension_mismatch(lm):
    params, vocab, _, data = lm
    with pytest.raises(ConfigurationError):
        predict_classes(params, None, new_task_head(32, 2, 4), vocab, data[:2])


def test_padding_does_not_change_prediction(lm):
    params, vocab, _, data = lm
    head = new_task_head(16, 2, 4, seed=3)
    head.tensors["cls.w"].data *= 50
    alone = [predict_classes(params, None, head, vocab, [ex])[0] for ex in data[:6]]
    assert predict_classes(params, None, head, vocab, data[:6]) == alone


def test_pair_truncation_longest_first():
    vocab = BpeVocab(())
    ids = pair_ids(vocab, NLIExample("a" * 20, "b" * 6, "neutral"), 12)
    assert len(ids) == 12
    assert ids == [97] * 5 + [10] + [98] * 6
    # ties cut the premise
    assert pair_ids(vocab, NLIExample("aaa", "bbb", "neutral"), 6) == [97, 97, 10, 98, 98, 98]


def separable_set(n_per=12, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for k, lab in enumerate(LABELS):
        for _ in range(n_per):
            noise = "".join(rng.choice(list("xyz"), size=3))
            out.append(NLIExample(noise, noise + "abc"[k] * 3, lab))
    return out


def test_toy_separable_reaches_full_accuracy():
    params = build_model(SMALL)
    vocab = BpeVocab((), (PAD,))
    data = separable_set()
    head = new_task_head(16, 2, 4, seed=1)
    before = checksum(params.tensors)
    train_task_head(params, None, head, vocab, data, TaskHyper(epochs=40, batch_size=12, lr=3e-2, seq_len=32))
    preds = predict_classes(params, None, head, vocab, data, 32)
    assert evaluate_accuracy(preds, [ex.label for ex in data]).accuracy == 1.0
    assert checksum(params.tensors) == before


def test_task_training_keeps_language_adapters(lm):
    params, vocab, _, data = lm
    p = params.copy()
    bank = inject_adapters(p, AdapterConfig(4), 0)
    before = checksum({**p.tensors, **bank.tensors})
    head = new_task_head(16, 2, 4)
    train_task_head(p, bank, head, vocab, data[:16], TaskHyper(epochs=1, batch_size=8, lr=1e-2, seq_len=64))
    assert checksum({**p.tensors, **bank.tensors}) == before
    assert not np.all(head.tensors["cls.b"].data == 0)


def test_empty_task_dataset(lm):
    params, vocab, _, _ = lm
    with pytest.raises(DataError):
        train_task_head(params, None, new_task_head(16, 2, 4), vocab, [])


# --- cross-lingual ---------------------------------------------------------------------


def test_identity_swap_equals_supervised(lm):
    params, vocab, _, data = lm
    p = params.copy()
    bank = inject_adapters(p, AdapterConfig(4), 0)
    bank.tensors["layer0.adpt.up"].data[:] = 0.3
    head = new_task_head(16, 2, 4, seed=2)
    train_task_head(p, bank, head, vocab, data[:20], TaskHyper(epochs=1, batch_size=10, lr=1e-2, seq_len=64))
    direct = evaluate_accuracy(predict_classes(p, bank, head, vocab, data, 64), [ex.label for ex in data])
    swapped = cross_lingual_eval(p, head, TargetArtifacts.from_model(p, vocab, bank), data, 64)
    assert swapped.accuracy == direct.accuracy and swapped.confusion == direct.confusion


def test_swap_dimension_mismatch(lm):
    params, vocab, _, data = lm
    other = build_model(ModelConfig(d_model=32, n_heads=2, n_layers=2, d_ffn=32, vocab_size=300, max_positions=128))
    with pytest.raises(ConfigurationError):
        cross_lingual_eval(params, new_task_head(16, 2, 4), TargetArtifacts.from_model(other, vocab, None), data)


def test_random_head_is_chance():
    lang = make_language("r", 11)
    data = nli_dataset(lang, 3000, 12)
    vocab = BpeVocab((), (PAD,))
    params = build_model(ModelConfig(n_layers=1, n_heads=1, d_model=8, d_ffn=8, vocab_size=257, max_positions=64))
    head = new_task_head(8, 1, 4, seed=4)
    head.tensors["cls.w"].data = np.random.default_rng(0).standard_normal((8, 3)).astype(np.float32)
    preds = predict_classes(params, None, head, vocab, data, 64, batch_size=500)
    acc = evaluate_accuracy(preds, [ex.label for ex in data]).accuracy
    sigma = math.sqrt((1 / 3) * (2 / 3) / 3000)
    assert abs(acc - 1 / 3) < 3 * sigma


# --- metrics and files -------------------------------------------------------------------


def test_accuracy_examples():
    gold = ["entailment", "contradiction", "neutral"] * 4
    assert evaluate_accuracy(gold, gold).accuracy == 1.0
    assert evaluate_accuracy(["neutral"] * 12, gold).accuracy == 1 / 3
    with pytest.raises(ContractError):
        evaluate_accuracy(gold[:3], gold)


@given(st.lists(st.tuples(st.sampled_from(LABELS), st.sampled_from(LABELS)), min_size=1, max_size=60))
def test_accuracy_matches_counting_oracle(pairs):
    preds, gold = zip(*pairs)
    rep = evaluate_accuracy(preds, gold)
    hits = Counter(p == g for p, g in pairs)[True]
    assert rep.accuracy == hits / len(pairs)
    assert sum(sum(row.values()) for row in rep.confusion.values()) == len(pairs)
    assert all(rep.confusion[g][p] == pairs.count((p, g)) for p in LABELS for g in LABELS)


def test_nli_tsv_roundtrip(tmp_path):
    data = nli_dataset(make_language("k", 1, "hangul"), 9, 2)
    write_nli_tsv(tmp_path / "d.tsv", data)
    assert read_nli_tsv(tmp_path / "d.tsv") == data


def test_nli_tsv_bad_row(tmp_path):
    (tmp_path / "d.tsv").write_text("p\th\n", encoding="utf-8")
    with pytest.raises(DataError):
        read_nli_tsv(tmp_path / "d.tsv")


def test_results_format():
    out = format_results([("zeroshot", "m", "xnli_de.tsv", 0.42444)])
    assert out == "setting\tmodel\tdataset\taccuracy\nzeroshot\tm\txnli_de.tsv\t0.4244\n"


def test_capacity_report_axis():
    rep = capacity_report(2048, 24, [16, 48, 384], {16: {"zeroshot": 0.4}})
    rows = [ln.split("\t") for ln in rep.splitlines()]
    assert rows[0] == ["reduction", "bottleneck", "capacity", "zeroshot"]
    assert [r[2] for r in rows[1:]] == ["12635136", "4178928", "540792"]
    assert rows[1][3] == "0.4000" and rows[2][3] == ""
