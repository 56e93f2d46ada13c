"""Two-stage category-diversity recommendation.

Stage one scores user/category pairs and keeps the top-K categories; stage
two retrieves items from a per-category inverted index restricted to those
triggers. K is the diversity knob.
"""

__version__ = "0.1.0"
