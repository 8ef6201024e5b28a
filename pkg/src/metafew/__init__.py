"""metafew: self-supervised meta-learning for few-shot text classification.

Pipeline: raw text -> sentence store + inverted index -> masked-subset
classification episodes (optionally mixed with supervised episodes) ->
first-order meta-training of a compact transformer with learned per-group
learning rates, warp (outer-loop-only) feed-forward layers and a generated
per-task softmax head -> k-shot evaluation and analysis.
"""

__version__ = "0.1.0"
