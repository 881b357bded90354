"""
Grapheme Embedding Lab

Trains a grapheme encoder on a synthetic acoustic-proxy task, then measures
what its contextual embeddings know about pronunciation.

Architecture:
    corpus (synthetic text + toy phonetizer)
        |
        v
    tts: encoder + attention decoder --frames--> acoustic proxy loss
        |
        | embeddings [T x 2H]
        v
    g2p: CTC probe (raw graphemes vs embeddings) --> metrics: PER
    analysis: t-SNE, k-NN purity, embedding swap

Modules:
    numerics    - Tensor/Tape autodiff, SplitMix64, Adam, gradient checking
    corpus      - sentence generator, rule phonetizer, splits, vocabularies
    tts         - CBH-LSTM encoder, additive and forward attention, proxy training
    ctc         - CTC loss, gradient, greedy decoding, brute-force oracle
    g2p         - shallow CTC probe and the four-probe PER grid
    metrics     - Levenshtein alignment, PER, paired permutation test
    analysis    - t-SNE, purity, swap experiment, tabular export
    checkpoint  - GEL1 tensor container
    config      - flat key=value configuration
    cli         - `graphemelab <subcommand>` entry point

Usage:
    graphemelab gen-corpus --out run
    graphemelab split --out run
    graphemelab train-tts --out run
    graphemelab table2 --out run

Output Format:
    {
        "success": true,
        "command": "table2",
        "outputs": ["run/table2.tsv", "..."],
        "metadata": {"per_embedding_train": 0.12}
    }
"""

__version__ = "1.0.0"
