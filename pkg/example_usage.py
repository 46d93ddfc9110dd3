"""
Example usage of dwellrec
This demonstrates how to use the library programmatically.
"""
import logging
import sys

from experiments import (LOG_FORMAT, EvalConfig, ModelSpec, compare_reports, fit_and_select)
from model import Batch, predict_topk
from preprocess import PreprocessConfig, prepare_corpus
from synth_generator import ClickstreamGenerator, SynthSpec
from trainer import TrainConfig


def example_compare():
    """Train IT-RNN and DT-RNN on a synthetic corpus and test the difference."""
    print("=== IT-RNN vs DT-RNN ===")

    # Corpus where dwell time decides the next item 90% of the time
    sessions = ClickstreamGenerator(SynthSpec(num_items=100, num_sessions=3000, days=5,
                                              signal=0.9, seed=1)).generate_sessions()
    split, prepared = prepare_corpus(sessions, PreprocessConfig())
    print(f"Test day {split.boundary_day}: {len(prepared.train_examples)} train examples, "
          f"{len(prepared.eval_examples)} test examples")

    train_config = TrainConfig(epochs=3, batch_size=128, seed=1)
    it_fit = fit_and_select(ModelSpec(kind='it', item_em_size=32, it_rnn_size=32),
                            prepared, train_config, EvalConfig(k=20))
    dt_fit = fit_and_select(ModelSpec(kind='dt', item_em_size=32, it_rnn_size=32,
                                      dt_em_size=8, dt_rnn_size=8),
                            prepared, train_config, EvalConfig(k=20), keep_params=True)

    for fit in (it_fit, dt_fit):
        print(f"{fit.spec.label}: recall@20 {fit.best.recall:.4f}, mrr@20 {fit.best.mrr:.4f} "
              f"(epoch {fit.best.epoch}, {fit.num_parameters} parameters)")
    test = compare_reports(dt_fit.best, it_fit.best)
    print(f"Wilcoxon on reciprocal ranks: W={test.statistic}, p={test.p_two_sided:.3g} ({test.method})")
    return prepared, dt_fit


def example_recommend(prepared, dt_fit):
    """Top-5 recommendations for a few test prefixes."""
    print("\n=== RECOMMEND ===")
    examples = prepared.eval_examples[:3]
    vocab = prepared.vocab
    for example, top in zip(examples, predict_topk(dt_fit.params, Batch.from_examples(examples), k=5)):
        history = [vocab.item_of(i) for i in example.input_items]
        print(f"session {example.session_id} after {history} "
              f"(dwell buckets {list(example.input_dwell)}):")
        print("    " + ", ".join(f"{vocab.item_of(i)} ({p:.2f})" for i, p in top)
              + f"  | actual {vocab.item_of(example.target_item)}")


if __name__ == '__main__':
    logging.basicConfig(level=logging.INFO, format=LOG_FORMAT, stream=sys.stderr)
    prepared, dt_fit = example_compare()
    example_recommend(prepared, dt_fit)
