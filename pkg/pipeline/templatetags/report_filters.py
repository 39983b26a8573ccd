"""
Template filters for the markdown report tables.
"""
from django import template

register = template.Library()

MISSING = '-'


def fixed(value, places=2):
    """Render a number with a fixed count of decimals; blanks stay blank."""
    if value is None or value == '':
        return MISSING
    if isinstance(value, str):
        return value
    return f"{float(value):.{int(places)}f}"


@register.filter
def lookup(dictionary, key):
    """Template filter to look up dictionary values by key."""
    if isinstance(dictionary, dict):
        return dictionary.get(key)
    return None


@register.filter
def ms(value):
    """Milliseconds at two decimals, the precision of the published tables."""
    return fixed(value, 2)


@register.filter
def percent(value):
    """A fraction in [0, 1] rendered as a percentage with two decimals."""
    if value is None:
        return MISSING
    return fixed(float(value) * 100, 2)


@register.filter
def decimals(value, places):
    return fixed(value, places)
