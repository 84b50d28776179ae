"""Zero-shot extraction of demographics, social history and family history
from clinical notes, with relaxed-NER and embedding-similarity scoring."""

__version__ = "0.1.0"
