"""discorel: mine connective argument pairs, pre-train a small masked encoder,
and classify implicit discourse relations through a cloze prompt."""

__version__ = "0.1.0"
