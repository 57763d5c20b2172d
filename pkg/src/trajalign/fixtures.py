"""Synthetic oncology fixtures for offline runs and tests.

Everything is generated from a seed: a 40-step guideline graph with two
entry points, a matching concept catalog and lexicon, a patient corpus
whose notes narrate walks along guideline paths, and an evaluation set
with three synthetic reference raters.
"""

from __future__ import annotations

import csv
import json
import random
from datetime import datetime, timedelta, timezone
from pathlib import Path

from .guideline import enumerate_paths, guideline_from_dict

GUIDELINE_NODES = [
    ("B00", "Cancer", "breast cancer"),
    ("B01", "ClinicalSituation", "early breast carcinoma diagnosed by core needle biopsy"),
    ("B02", "ClinicalSituation", "HER2 positive tumour on immunohistochemistry"),
    ("B03", "ClinicalSituation", "hormone receptor positive HER2 negative tumour"),
    ("B04", "ClinicalSituation", "triple negative tumour"),
    ("B05", "ClinicalSituation", "metastatic breast cancer with distant metastasis"),
    ("B06", "Treatment", "neoadjuvant chemotherapy with trastuzumab"),
    ("B07", "Treatment", "breast conserving surgery or mastectomy"),
    ("B08", "Treatment", "adjuvant radiotherapy to the breast"),
    ("B09", "Treatment", "adjuvant endocrine therapy with tamoxifen"),
    ("B10", "Treatment", "adjuvant chemotherapy with anthracycline and taxane"),
    ("B11", "Treatment", "first line chemotherapy for metastatic disease"),
    ("B12", "Treatment", "trastuzumab maintenance targeted therapy"),
    ("B13", "Treatment", "surveillance mammogram and clinical follow up"),
    ("B14", "Treatment", "cdk4/6 inhibitor combined with endocrine therapy"),
    ("B15", "Treatment", "pembrolizumab immunotherapy plus chemotherapy"),
    ("B16", "ClinicalSituation", "disease progression on restaging imaging"),
    ("B17", "Treatment", "second line systemic chemotherapy"),
    ("B18", "Treatment", "palliative care and symptom management"),
    ("B19", "ClinicalSituation", "BRCA mutation detected on germline testing"),
    ("L00", "Cancer", "lung cancer"),
    ("L01", "ClinicalSituation", "lung adenocarcinoma diagnosed by bronchoscopic biopsy"),
    ("L02", "ClinicalSituation", "stage II resectable disease"),
    ("L03", "ClinicalSituation", "stage III unresectable locally advanced disease"),
    ("L04", "ClinicalSituation", "stage IV metastatic disease"),
    ("L05", "ClinicalSituation", "EGFR mutation positive on molecular testing"),
    ("L06", "ClinicalSituation", "ALK rearrangement positive on molecular testing"),
    ("L07", "ClinicalSituation", "PD-L1 high expression without driver mutation"),
    ("L08", "Treatment", "lobectomy with mediastinal lymph node dissection surgery"),
    ("L09", "Treatment", "adjuvant platinum based chemotherapy"),
    ("L10", "Treatment", "concurrent chemoradiotherapy with radiotherapy to the chest"),
    ("L11", "Treatment", "durvalumab consolidation immunotherapy"),
    ("L12", "Treatment", "osimertinib targeted therapy"),
    ("L13", "Treatment", "alectinib targeted therapy"),
    ("L14", "Treatment", "pembrolizumab immunotherapy"),
    ("L15", "Treatment", "surveillance chest CT follow up"),
    ("L16", "ClinicalSituation", "disease progression on CT imaging"),
    ("L17", "Treatment", "second line docetaxel chemotherapy"),
    ("L18", "Treatment", "palliative radiotherapy for symptomatic metastasis"),
    ("L19", "Treatment", "best supportive care"),
]

GUIDELINE_EDGES = [
    ("B00", "B01", "presents_as"), ("B00", "B05", "presents_as"),
    ("B01", "B02", "subtype"), ("B01", "B03", "subtype"), ("B01", "B04", "subtype"), ("B01", "B19", "subtype"),
    ("B02", "B06", "recommends"), ("B06", "B07", "followed_by"), ("B07", "B08", "followed_by"),
    ("B08", "B12", "followed_by"), ("B12", "B13", "followed_by"),
    ("B03", "B07", "recommends"), ("B08", "B09", "followed_by"), ("B09", "B13", "followed_by"),
    ("B04", "B15", "recommends"), ("B15", "B07", "followed_by"), ("B07", "B10", "followed_by"),
    ("B10", "B08", "followed_by"), ("B19", "B10", "recommends"),
    ("B05", "B14", "recommends"), ("B05", "B11", "recommends"),
    ("B14", "B16", "monitored_by"), ("B11", "B16", "monitored_by"), ("B13", "B16", "monitored_by"),
    ("B16", "B17", "recommends"), ("B17", "B16", "monitored_by"), ("B17", "B18", "followed_by"),
    ("L00", "L01", "presents_as"),
    ("L01", "L02", "staged_as"), ("L01", "L03", "staged_as"), ("L01", "L04", "staged_as"),
    ("L02", "L08", "recommends"), ("L08", "L09", "followed_by"), ("L09", "L15", "followed_by"),
    ("L03", "L10", "recommends"), ("L10", "L11", "followed_by"), ("L11", "L15", "followed_by"),
    ("L04", "L05", "tested_for"), ("L04", "L06", "tested_for"), ("L04", "L07", "tested_for"),
    ("L05", "L12", "recommends"), ("L06", "L13", "recommends"), ("L07", "L14", "recommends"),
    ("L12", "L16", "monitored_by"), ("L13", "L16", "monitored_by"), ("L14", "L16", "monitored_by"),
    ("L15", "L16", "monitored_by"),
    ("L16", "L17", "recommends"), ("L16", "L18", "recommends"),
    ("L17", "L19", "followed_by"), ("L18", "L19", "followed_by"),
]

GUIDELINE_ROOTS = ["B00", "L00"]

CATALOG_CONCEPTS = [
    ("C001", "breast cancer", ["breast carcinoma", "乳腺癌"], "disease"),
    ("C002", "lung cancer", ["lung adenocarcinoma", "non small cell lung cancer", "肺癌", "肺腺癌"], "disease"),
    ("C003", "chemotherapy", ["chemo", "化疗"], "procedure"),
    ("C004", "radiotherapy", ["radiation therapy", "放疗"], "procedure"),
    ("C005", "chemoradiotherapy", ["concurrent chemoradiotherapy"], "procedure"),
    ("C006", "mastectomy", ["breast conserving surgery"], "procedure"),
    ("C007", "lobectomy", [], "procedure"),
    ("C008", "trastuzumab", ["herceptin"], "drug"),
    ("C009", "tamoxifen", [], "drug"),
    ("C010", "osimertinib", ["奥希替尼"], "drug"),
    ("C011", "alectinib", [], "drug"),
    ("C012", "pembrolizumab", ["keytruda"], "drug"),
    ("C013", "durvalumab", [], "drug"),
    ("C014", "docetaxel", [], "drug"),
    ("C015", "egfr mutation", ["egfr", "egfr突变"], "biomarker"),
    ("C016", "alk rearrangement", ["alk"], "biomarker"),
    ("C017", "her2 positive", ["her2"], "biomarker"),
    ("C018", "pd-l1 expression", ["pd-l1"], "biomarker"),
    ("C019", "brca mutation", ["brca"], "biomarker"),
    ("C020", "computed tomography", ["ct", "chest ct", "ct scan"], "imaging"),
    ("C021", "mammogram", ["mammography"], "imaging"),
    ("C022", "disease progression", ["progression", "进展"], "finding"),
    ("C023", "metastasis", ["metastatic disease", "转移"], "finding"),
    ("C024", "palliative care", ["best supportive care", "supportive care"], "procedure"),
    ("C025", "immunotherapy", ["免疫治疗"], "procedure"),
]

CATALOG_RELATIONS = [
    ("C003", "C001", "treats"), ("C003", "C002", "treats"), ("C004", "C001", "treats"),
    ("C010", "C015", "targets"), ("C011", "C016", "targets"), ("C008", "C017", "targets"),
    ("C012", "C018", "targets"), ("C020", "C022", "detects"), ("C021", "C001", "screens"),
]

FIXTURE_LEXICON = {
    "diagnosis": ["diagnosed", "biopsy", "carcinoma", "adenocarcinoma", "确诊", "诊断"],
    "staging": ["stage", "metastatic", "metastasis", "progression", "分期", "转移", "进展"],
    "treatment": [
        "chemotherapy", "radiotherapy", "chemoradiotherapy", "surgery", "mastectomy", "lobectomy",
        "immunotherapy", "targeted therapy", "endocrine therapy", "palliative", "supportive care",
        "化疗", "放疗", "手术", "靶向治疗", "免疫治疗", "支持治疗",
    ],
    "biomarker": ["egfr", "her2", "alk", "pd-l1", "brca", "hormone receptor", "突变"],
    "imaging": ["ct", "mammogram", "imaging", "mri", "影像", "复查"],
}

NOTE_PREFIXES = [
    "Assessment: {}.",
    "Plan discussed with the patient: {}.",
    "The team documented {}.",
    "Clinic note records {}.",
]

FILLER = [
    "Vital signs were stable during the visit.",
    "The patient reports mild fatigue and a good appetite.",
    "No fever or chills since the last appointment.",
    "Family history was reviewed and updated.",
    "Performance status remains good.",
    "Medication list reconciled with the pharmacy.",
]

ZH_STEPS = {
    "L01": "支气管镜活检确诊肺腺癌。",
    "L04": "分期评估提示IV期转移性疾病。",
    "L05": "分子检测提示EGFR突变阳性。",
    "L12": "开始奥希替尼靶向治疗。",
    "L16": "复查CT影像提示疾病进展。",
    "L17": "二线多西他赛化疗。",
    "L18": "针对症状性转移灶行姑息放疗。",
    "L19": "给予最佳支持治疗。",
    "L00": "肺癌。",
}
ZH_FILLER = ["患者一般情况良好。", "无发热。"]

LENGTH_TARGETS = (4875, 6303, 9411)


def guideline_dict() -> dict:
    return {
        "nodes": [{"id": i, "kind": k, "desc": d} for i, k, d in GUIDELINE_NODES],
        "edges": [{"src": s, "dst": d, "rel": r} for s, d, r in GUIDELINE_EDGES],
        "roots": list(GUIDELINE_ROOTS),
    }


def catalog_dict() -> dict:
    return {
        "concepts": [{"id": i, "name": n, "synonyms": s, "category": c} for i, n, s, c in CATALOG_CONCEPTS],
        "relations": [{"src": s, "dst": d, "rel": r} for s, d, r in CATALOG_RELATIONS],
    }


def _iso(ts: datetime) -> str:
    return ts.strftime("%Y-%m-%dT%H:%M:%SZ")


def corpus_records(n_patients: int = 20, seed: int = 0) -> list[dict]:
    """Document records for ``n_patients`` synthetic patients, in shuffled line order.

    Each patient follows a random guideline path from one root. Its steps are
    spread over 2-5 encounters, one note per encounter, with filler
    sentences mixed in. The last two patients (when there are at least
    four) write in Chinese along an EGFR-positive lung path.
    """
    rng = random.Random(seed)
    g = guideline_from_dict(guideline_dict())
    paths, _ = enumerate_paths(g)
    by_root = {r: [p for p in paths if p.steps[0] == r] for r in GUIDELINE_ROOTS}
    descs = {i: d for i, _, d in GUIDELINE_NODES}
    zh_path = next(p for p in by_root["L00"] if "L05" in p.steps and set(p.steps) <= set(ZH_STEPS))
    records = []
    for k in range(n_patients):
        pid = f"P{k + 1:03d}"
        zh = n_patients >= 4 and k >= n_patients - 2
        path = zh_path if zh else rng.choice(by_root[rng.choice(GUIDELINE_ROOTS)])
        steps = list(path.steps)
        n_enc = min(len(steps), rng.randint(2, 5))
        cuts = sorted(rng.sample(range(1, len(steps)), n_enc - 1))
        groups = [steps[a:b] for a, b in zip([0] + cuts, cuts + [len(steps)])]
        ts = datetime(2018, 1, 1, tzinfo=timezone.utc) + timedelta(days=rng.randint(0, 1000), hours=rng.randint(8, 17))
        for group in groups:
            if zh:
                sentences = [ZH_STEPS[s] for s in group] + [rng.choice(ZH_FILLER)]
                text = "".join(sentences)
            else:
                sentences = [rng.choice(NOTE_PREFIXES).format(descs[s]) for s in group]
                sentences.insert(rng.randint(0, len(sentences)), rng.choice(FILLER))
                text = " ".join(sentences)
            records.append({"patient_id": pid, "timestamp": _iso(ts), "text": text, "lang": "zh" if zh else "en"})
            ts += timedelta(days=rng.randint(14, 120))
    rng.shuffle(records)
    return records


def synth_length_counts(targets=LENGTH_TARGETS, per_bucket: int = 30, spread: int = 400, seed: int = 0) -> list[int]:
    """Token counts whose length terciles average exactly ``targets``.

    Bucket k draws integers within +-spread of its target, then nudges one
    value so the bucket mean lands on the target. Targets must be more than
    2*spread (plus the nudge) apart for the terciles to stay separated.
    """
    rng = random.Random(seed)
    counts = []
    for t in targets:
        vals = [rng.randint(t - spread, t + spread) for _ in range(per_bucket)]
        vals[-1] += t * per_bucket - sum(vals)
        counts.extend(vals)
    rng.shuffle(counts)
    return counts


def evaluation_items(n_items: int = 24, seed: int = 0) -> list[dict]:
    rng = random.Random(seed + 1)
    counts = synth_length_counts(per_bucket=max(1, n_items // 3), seed=seed)[:n_items]
    items = []
    for k in range(n_items):
        task = "clinical_summary" if k % 2 == 0 else "clinical_recommendation"
        items.append({
            "item_id": f"it{k + 1:02d}",
            "task": task,
            "method": "trajalign" if k % 4 < 2 else "baseline",
            "prompt_context": f"Context bundle {k + 1} for a synthetic oncology patient.",
            "candidate_text": f"Synthetic {task.replace('_', ' ')} number {k + 1}. " + rng.choice(FILLER),
            "token_count": counts[k],
        })
    return items


def reference_ratings(items: list[dict], raters=("exp1", "exp2", "exp3"), seed: int = 0) -> list[dict]:
    """Three noisy raters around a shared latent quality per item."""
    rng = random.Random(seed + 2)
    rows = []
    for it in items:
        quality = rng.uniform(1.5, 4.5)
        for r in raters:
            row = {"item_id": it["item_id"], "rater_id": r}
            for dim in ("factual", "completeness", "soundness", "actionability"):
                row[dim] = min(5, max(1, round(quality + rng.gauss(0, 0.6))))
            rows.append(row)
    return rows


CONFIG_TEMPLATE = """\
seed = {seed}
parallelism = 2

[paths]
corpus = "corpus.jsonl"
catalog = "catalog.json"
guideline = "guideline.json"
lexicon = "lexicon.json"
items = "items.jsonl"
reference = "reference.csv"
out = "out"

[embedding]
kind = "hash"
dim = 384

[bootstrap]
alpha = 0.5
theta = 0.7
iterations = 10
top_n = 5

[limits]
context_tokens = 20000
output_tokens = 4096

[providers]
stub_reranker = true
stub_judges = true
judges = ["judge_a", "judge_b", "judge_c"]
"""


def write_fixtures(out_dir, seed: int = 0, n_patients: int = 20, n_items: int = 24) -> dict:
    """Write the fixture bundle and return its manifest of counts."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = corpus_records(n_patients, seed)
    with open(out / "corpus.jsonl", "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, ensure_ascii=False) + "\n")
    for name, data in (("guideline.json", guideline_dict()), ("catalog.json", catalog_dict()),
                       ("lexicon.json", FIXTURE_LEXICON)):
        with open(out / name, "w", encoding="utf-8") as fh:
            json.dump(data, fh, ensure_ascii=False, indent=1)
            fh.write("\n")
    items = evaluation_items(n_items, seed)
    with open(out / "items.jsonl", "w", encoding="utf-8") as fh:
        for it in items:
            fh.write(json.dumps(it, ensure_ascii=False) + "\n")
    ratings = reference_ratings(items, seed=seed)
    with open(out / "reference.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, ["item_id", "rater_id", "factual", "completeness", "soundness", "actionability"],
                           lineterminator="\n")
        w.writeheader()
        w.writerows(ratings)
    (out / "config.toml").write_text(CONFIG_TEMPLATE.format(seed=seed), encoding="utf-8")
    manifest = {
        "patients": len({r["patient_id"] for r in records}),
        "documents": len(records),
        "guideline_nodes": len(GUIDELINE_NODES),
        "guideline_edges": len(GUIDELINE_EDGES),
        "guideline_roots": len(GUIDELINE_ROOTS),
        "catalog_concepts": len(CATALOG_CONCEPTS),
        "items": len(items),
        "reference_rows": len(ratings),
    }
    with open(out / "fixture_manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest
