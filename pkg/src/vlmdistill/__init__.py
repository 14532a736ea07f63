"""Vision-language teacher annotations as auxiliary supervision for end-to-end planners.

Modules: ``projection`` (trajectory overlays), ``annotation`` (prompts,
teacher clients, parsing, store), ``encoding`` (supervision tensors),
``heads`` (auxiliary query heads), ``losses``, ``toy`` (synthetic planner
harness), ``metrics`` and ``cli``.
"""

__version__ = "0.1.0"
