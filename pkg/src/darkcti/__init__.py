"""Threat-intelligence pipeline for darknet/deepnet marketplaces and forums.

crawl -> parse -> label -> train -> classify -> evaluate -> analyze
"""

from darkcti.datamodel import (
    ForumPost,
    ForumTopic,
    Label,
    LabeledExample,
    MarketProduct,
    RecordKind,
)

__version__ = "0.1.0"

__all__ = [
    "ForumPost",
    "ForumTopic",
    "Label",
    "LabeledExample",
    "MarketProduct",
    "RecordKind",
]
