"""Input checks shared by the estimators."""

from __future__ import annotations

from .data import DatasetBundle, RecInteraction, VocabularyError


def check_bundle(bundle) -> DatasetBundle:
    if not isinstance(bundle, DatasetBundle):
        raise TypeError(f"expected a DatasetBundle, got {type(bundle).__name__}")
    if not bundle.train:
        raise ValueError("the training split is empty")
    return bundle


def check_records(records, bundle: DatasetBundle) -> list[RecInteraction]:
    """A list of rec interactions whose ids fit ``bundle``'s vocabulary."""
    if isinstance(records, RecInteraction):
        records = [records]
    records = list(records)
    if not records:
        raise ValueError("no records given")
    for r in records:
        if not isinstance(r, RecInteraction):
            raise TypeError(f"expected RecInteraction, got {type(r).__name__}")
        if not (0 <= r.user < bundle.vocab.n_users and 0 <= r.item < bundle.vocab.n_items):
            raise VocabularyError(f"record {r} is outside the vocabulary")
    return records
