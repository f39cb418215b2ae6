"""Cross-view training for tagging, parsing and sequence transduction."""

try:
    from cvt._cvt import *  # noqa: F401,F403
except ImportError:  # in-tree build: the extension sits next to the package
    from _cvt import *  # noqa: F401,F403
