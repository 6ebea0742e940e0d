"""repadvise: learn input representations that elicit good human decisions.

The package trains an embedding through a differentiable stand-in for the
decision-maker: collect decisions on current representations, fit the
stand-in, push gradients through it to improve the embedding, repeat.
Three runnable settings are included: 2-D scatterplot projections of point
clouds, face-parameter vectors for loan records, and a fully simulated
side-information task.
"""

__version__ = "0.1.0"
