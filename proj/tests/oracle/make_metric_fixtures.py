#!/usr/bin/env python3
"""Builds the BLEU/chrF fixtures and freezes reference-scorer values.

Run once, offline, with sacrebleu installed:

    python3 tests/oracle/make_metric_fixtures.py tests/fixtures

Writes metrics_<pair>.tsv (hyp<TAB>ref, 50 rows each), sentence_bleu.tsv
(10 rows) and metric_goldens.json. The C++ tests only read these files.
"""
import json
import random
import sys
from pathlib import Path

import sacrebleu
from sacrebleu.metrics import BLEU, CHRF

WORDS = {
    "de": ("Die Kommission hat am Dienstag einen neuen Vorschlag für die Regulierung "
           "der Märkte vorgelegt , der 3,5 Millionen Bürger betrifft . Über 40-jährige "
           "Arbeitnehmer können ab 2024 früher in Rente gehen , sagte der Minister . "
           "Im Krankenhaus wurden 12 Patienten mit schweren Symptomen behandelt . "
           "Wir müssen die Grenzwerte für Schadstoffe überprüfen und die Umwelt schützen .").split(),
    "en": ("The committee approved the report on Tuesday after a long debate about "
           "fiscal policy , and 4-month-old mice were no longer diabetic , he added . "
           "Prices rose by 2.7 % in March while unemployment fell to 5,1 percent . "
           "The patient received 20 mg of the drug twice a day & recovered quickly . "
           "\"We now have new data\" , said the researcher from the U.S. institute .").split(),
    "pt": ("A comissão aprovou o relatório na terça-feira após um longo debate sobre "
           "política fiscal , e os ratos de 4 meses já não eram diabéticos , acrescentou . "
           "Os preços subiram 2,7 % em março enquanto o desemprego caiu para 5 por cento . "
           "O paciente recebeu 20 mg do medicamento duas vezes por dia e recuperou .").split(),
    "ru": ("Комиссия одобрила доклад во вторник после долгих дебатов о налоговой "
           "политике , и 4-месячные мыши больше не были больны диабетом , добавил он . "
           "Цены выросли на 2,7 % в марте , а безработица снизилась до 5 процентов . "
           "Пациент получал 20 мг препарата дважды в день и быстро поправился .").split(),
}


def make_reference(rng, lang):
    words = WORDS[lang]
    n = rng.randint(4, 22)
    start = rng.randrange(0, len(words) - n)
    toks = words[start:start + n]
    text = " ".join(toks)
    # detokenize punctuation so the 13a tokenizer has work to do
    for p in [" ,", " .", " %", " ?", " !"]:
        text = text.replace(p, p.strip())
    if rng.random() < 0.3:
        text = text[0].upper() + text[1:]
    return text


def perturb(rng, ref, lang):
    toks = ref.split()
    r = rng.random()
    if r < 0.08:
        return ref  # exact match
    if r < 0.12:
        return " ".join(rng.sample(WORDS[lang], k=min(6, len(WORDS[lang]))))  # mostly unrelated
    toks = toks[:]
    for _ in range(rng.randint(1, 4)):
        op = rng.random()
        if op < 0.3 and len(toks) > 2:
            del toks[rng.randrange(len(toks))]
        elif op < 0.55:
            toks.insert(rng.randrange(len(toks) + 1), rng.choice(WORDS[lang]))
        elif op < 0.8 and len(toks) > 1:
            i = rng.randrange(len(toks) - 1)
            toks[i], toks[i + 1] = toks[i + 1], toks[i]
        else:
            toks[rng.randrange(len(toks))] = rng.choice(WORDS[lang])
    out = " ".join(toks)
    if rng.random() < 0.2:
        out = out.rstrip(".") + " ."
    if rng.random() < 0.1:
        out = out + "  "
    return out


def main(outdir):
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    goldens = {"sacrebleu_version": sacrebleu.__version__, "corpora": {}}
    corpus_bleu = BLEU(smooth_method="none", tokenize="13a")
    chrf = CHRF()
    for pair, lang, seed in [("en-de", "de", 11), ("pt-en", "en", 22), ("ru-en", "en", 33)]:
        rng = random.Random(seed)
        rows = []
        for _ in range(50):
            ref = make_reference(rng, lang)
            rows.append((perturb(rng, ref, lang), ref))
        with open(outdir / f"metrics_{pair}.tsv", "w", encoding="utf-8", newline="\n") as f:
            for h, r in rows:
                f.write(f"{h}\t{r}\n")
        hyps = [h for h, _ in rows]
        refs = [r for _, r in rows]
        goldens["corpora"][pair] = {
            "corpus_bleu": corpus_bleu.corpus_score(hyps, [refs]).score,
            "corpus_bleu_exp": sacrebleu.corpus_bleu(hyps, [refs]).score,
            "chrf": chrf.corpus_score(hyps, [refs]).score,
            "sentence_bleu": [sacrebleu.sentence_bleu(h, [r]).score for h, r in rows],
            "sentence_chrf": [chrf.sentence_score(h, [r]).score for h, r in rows],
        }

    # 10-sentence fixture for sentence-level BLEU, mixing languages.
    rng = random.Random(44)
    rows = []
    for i in range(10):
        lang = ["de", "en", "pt", "ru"][i % 4]
        ref = make_reference(rng, lang)
        rows.append((perturb(rng, ref, lang), ref))
    rows[0] = ("", rows[0][1])
    with open(outdir / "sentence_bleu.tsv", "w", encoding="utf-8", newline="\n") as f:
        for h, r in rows:
            f.write(f"{h}\t{r}\n")
    goldens["sentence_fixture"] = [sacrebleu.sentence_bleu(h, [r]).score for h, r in rows]

    # Character tokenization (used for Chinese targets).
    zh = [("我们现在有四个月大的老鼠。", "我们现在有四个月大的小鼠。"),
          ("价格在三月上涨了。", "三月价格上涨了2.7%。")]
    goldens["char_tokenized"] = {
        "rows": zh,
        "corpus_bleu": BLEU(smooth_method="none", tokenize="char").corpus_score(
            [h for h, _ in zh], [[r for _, r in zh]]).score,
    }
    with open(outdir / "metric_goldens.json", "w", encoding="utf-8") as f:
        json.dump(goldens, f, ensure_ascii=False, indent=1)


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "tests/fixtures")
