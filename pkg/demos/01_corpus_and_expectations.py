"""From a probabilistic index to expected word statistics.

Generates a small synthetic collection (so the true text is known), writes
the index/manifest files, ingests them back, and shows how sums and maxima
of relevance probabilities estimate running-word counts, in-document word
frequencies and document frequencies.
"""

import tempfile
from pathlib import Path

from prix_classify import (
    SynthConfig, build_expectation_table, expected_doc_frequency,
    expected_doc_words, expected_word_freq, generate,
)
from prix_classify.ingest import ingest

corpus = generate(
    SynthConfig(
        num_classes=2, docs_per_class=[3, 3], pages_per_doc=(1, 2),
        words_per_page=(12, 20), vocab_size=40, signatures_per_class=2,
        signature_prob=0.3, noise_words_per_page=(1, 3), seed=7,
    )
)

with tempfile.TemporaryDirectory() as tmp:
    paths = corpus.write(tmp)
    print("wrote:", ", ".join(p.name for p in paths.values()))
    print("\nfirst index lines:")
    for line in Path(paths["prix"]).read_text().splitlines()[:5]:
        print("   ", line)
    collection = ingest([paths["prix"]], paths["manifest"], strict=True)

print(f"\ncollection: {collection.num_documents} documents, "
      f"{collection.num_pages} pages, classes {collection.classes}")

doc = collection.documents[0]
true_words = [w for p in doc.pages for w in corpus.truths[p.page_id]]
print(f"\ndocument {doc.doc_id!r} truly has {len(true_words)} words;")
print(f"expected running words from the index: {expected_doc_words(doc):.2f}")
print("(each spot contributes its relevance probability, false spots add a little)")

word = corpus.signature_words[doc.class_label][0]
print(f"\nsignature word {word!r}:")
print(f"  true occurrences in {doc.doc_id}: {true_words.count(word)}")
print(f"  expected occurrences:             {expected_word_freq(doc, word):.2f}")
print(f"  expected number of documents containing it: "
      f"{expected_doc_frequency(collection, word):.2f}")
print(f"  ... restricted to class {doc.class_label!r}: "
      f"{expected_doc_frequency(collection, word, doc.class_label):.2f}")

table = build_expectation_table(collection)
total = sum(table.doc_running.values())
print(f"\nfull table: {len(table.vocabulary)} distinct words, "
      f"{total:.1f} expected running words in the collection")
