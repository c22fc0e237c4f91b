"""Human-in-the-loop fine-tuning of a guidance captioner with a surrogate scorer.

The pipeline: a small differentiable captioner turns a feature vector into a
structured finding caption plus a latent embedding, a judge (simulated oracle
or live human) scores generated guidance, a weighted kernel ridge surrogate
generalizes the scarce scores, and the loop fine-tunes the captioner on
NLL plus a surrogate-score penalty.
"""

__version__ = "0.1.0"
