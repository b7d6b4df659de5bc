import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from memsearch.corpus import LABELS, ClaimRecord, EvidencePointer, Label
from memsearch.encoder import split_tokens
from memsearch.seqformat import DEFAULT_MAX_LEN, dedup_evidence, format_query, format_support

CLAIM = ClaimRecord(
    0,
    "Charles de Gaulle was a leader in the French Resistance.",
    Label.SUPPORTS,
    ((EvidencePointer("Charles de Gaulle", 12),),),
)
FR0 = (EvidencePointer("French Resistance", 0),
       "The French Resistance (La Résistance) was the collection of French resistance movements that "
       "fought against the Nazi German occupation of France and against the collaborationist Vichy "
       "régime during the Second World War.")
CG1 = (EvidencePointer("Charles de Gaulle", 1),
       "He was the leader of Free France (1940 -- 44) and the head of the Provisional Government of the "
       "French Republic (1944 -- 46).")
CG12 = (EvidencePointer("Charles de Gaulle", 12),
        "Despite frosty relations with Britain and especially the United States, he emerged as the "
        "undisputed leader of the French resistance.")
CG0 = (EvidencePointer("Charles de Gaulle", 0),
       "Charles André Joseph Marie de Gaulle ([ʃaʁl də ɡol]; 22 November 1890 -- 9 November 1970) was a "
       "French general and statesman.")
EP7 = (EvidencePointer("Resistance (EP)", 7), "This EP or mini-album sold nearly all of its 200,000 copies.")

C = "Charles de Gaulle was a leader in the French Resistance."
U_FR0 = ("Evidence: French Resistance, sentence 0: The French Resistance (La Résistance) was the collection "
         "of French resistance movements that fought against the Nazi German occupation of France and against "
         "the collaborationist Vichy régime during the Second World War.")
U_CG1 = ("Evidence: Charles de Gaulle, sentence 1: He was the leader of Free France (1940 -- 44) and the head "
         "of the Provisional Government of the French Republic (1944 -- 46).")
U_CG12 = ("Evidence: Charles de Gaulle, sentence 12: Despite frosty relations with Britain and especially the "
          "United States, he emerged as the undisputed leader of the French resistance.")
U_CG0 = ("Evidence: Charles de Gaulle, sentence 0: Charles André Joseph Marie de Gaulle ([ʃaʁl də ɡol]; "
         "22 November 1890 -- 9 November 1970) was a French general and statesman.")
U_EP7 = "Evidence: Resistance (EP), sentence 7: This EP or mini-album sold nearly all of its 200,000 copies."


def test_charles_de_gaulle_queries():
    assert format_query(CLAIM, 1).text == "Claim: " + C
    assert format_query(CLAIM, 2).text == "Consider: Claim: " + C
    assert format_query(CLAIM, 3).text == "Predict: Claim: " + C
    assert format_query(CLAIM, 3, "reference").text == "Reference: Claim: " + C


def test_charles_de_gaulle_level1_supports():
    for ev, want in [(FR0, U_FR0), (CG1, U_CG1), (CG12, U_CG12), (EP7, U_EP7)]:
        assert format_support(1, CLAIM, [ev]).text == want


def test_charles_de_gaulle_level2_supports():
    for ev, want in [(CG1, U_CG1), (CG12, U_CG12), (CG0, U_CG0)]:
        assert format_support(2, CLAIM, [ev]).text == f"Consider: Claim: {C} {want}"


def test_charles_de_gaulle_level3_supports():
    joined = " ".join([U_CG1, U_CG12, U_CG0])
    for lab in LABELS:
        got = format_support(3, CLAIM, [CG1, CG12, CG0], label=lab).text
        assert got == f"{lab.value}: Claim: {C} {joined}"
    # reference training sequences carry the gold evidence only
    assert format_support(3, CLAIM, [CG12], label=Label.SUPPORTS).text == f"Supports: Claim: {C} {U_CG12}"
    assert format_support(3, CLAIM, [CG12], label=Label.REFUTES).text == f"Refutes: Claim: {C} {U_CG12}"
    assert (format_support(3, CLAIM, [CG12], label=Label.UNVERIFIABLE).text
            == f"Unverifiable: Claim: {C} {U_CG12}")


def test_level3_without_evidence_keeps_label_and_claim():
    assert format_support(3, CLAIM, [], label=Label.UNVERIFIABLE).text == f"Unverifiable: Claim: {C}"


@pytest.mark.parametrize("level,evidence,label", [
    (1, [], None), (1, [CG1, CG12], None), (1, [CG1], Label.SUPPORTS),
    (2, [], None), (2, [CG1], Label.REFUTES), (3, [CG1], None), (4, [CG1], None),
])
def test_support_preconditions(level, evidence, label):
    with pytest.raises(ValueError):
        format_support(level, CLAIM, evidence, label=label)


def test_query_rejects_unknown_mode():
    with pytest.raises(ValueError):
        format_query(CLAIM, 1, "reference")
    with pytest.raises(ValueError):
        format_query(CLAIM, 4)


def test_dedup_keeps_first_occurrence_order():
    a, b = EvidencePointer("A", 0), EvidencePointer("B", 1)
    assert dedup_evidence([b, a, b, a]) == [b, a]


def test_truncation_trims_evidence_text_only():
    long = (EvidencePointer("Page", 3), " ".join(f"w{i}" for i in range(300)))
    seq = format_support(2, CLAIM, [long], max_tokens=60)
    assert seq.truncated
    assert len(split_tokens(seq.text)) <= 60
    assert seq.text.startswith(f"Consider: Claim: {C} Evidence: Page, sentence 3: w0 w1")


def test_truncation_noop_when_short():
    seq = format_support(1, CLAIM, [CG1], max_tokens=50)
    assert not seq.truncated and seq.text == U_CG1


_words = st.lists(st.text(st.sampled_from("abcxyz,.;"), min_size=1, max_size=6), min_size=0, max_size=90)


@settings(max_examples=60, deadline=None)
@given(texts=st.lists(_words, min_size=1, max_size=5), level=st.sampled_from([1, 2, 3]))
def test_tokenized_length_never_exceeds_level_limit(texts, level):
    ev = [(EvidencePointer("T", i), " ".join(w)) for i, w in enumerate(texts)]
    if level < 3:
        ev = ev[:1]
    label = Label.REFUTES if level == 3 else None
    seq = format_support(level, CLAIM, ev, label=label, max_tokens=DEFAULT_MAX_LEN[level])
    assert len(split_tokens(seq.text)) <= DEFAULT_MAX_LEN[level]
    # headers survive truncation
    for p, _ in ev:
        assert f"Evidence: {p.page_title}, sentence {p.sentence_index}:" in seq.text
