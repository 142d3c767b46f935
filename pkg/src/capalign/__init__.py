"""Caption-alignment pipeline.

Stages: span corpus -> prompt-completion pairs -> tokenized captions ->
LLM-expanded captions -> contrastive two-tower training -> zero-shot
concept evaluation.
"""

__version__ = "0.1.0"
