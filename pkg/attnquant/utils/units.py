# -*- coding: utf-8 -*-
"""
Unitful report quantities with pint.


https://pint.readthedocs.io/en/stable/index.html
"""

from typing import Union

import pint

ureg = pint.UnitRegistry()


def assume_units(value: Union[pint.Quantity, str, float], units: Union[pint.Unit, str]
                 ) -> pint.Quantity:
    """Return a unitful quantity, assuming, if necessary the `units`.

    :param value: A value that may or may not be unitful.
    :param units: Units to be assumed for ``value`` if it does not already
        have units.
    :return: A unitful quantity that has either the units of ``value`` or
        ``units``, depending on if ``value`` is unitful.
    """
    if isinstance(value, pint.Quantity):
        return value
    elif isinstance(value, str):
        value = ureg.Quantity(value)
        if value.dimensionless:  # type: ignore
            return ureg.Quantity(value.magnitude, units)  # type: ignore
        return value  # type: ignore
    return ureg.Quantity(value, units)


def wall_time(seconds: Union[pint.Quantity, str, float]) -> pint.Quantity:
    """Wall time, rounded to milliseconds."""
    quantity = assume_units(seconds, "s").to("s")
    return ureg.Quantity(round(float(quantity.magnitude), 3), "s")


def storage_size(nbytes: Union[pint.Quantity, str, int]) -> pint.Quantity:
    """Storage size in a compact binary prefix (B, KiB, MiB...)."""
    quantity = assume_units(nbytes, "B").to("B")
    magnitude = float(quantity.magnitude)
    prefixes = ["B", "KiB", "MiB", "GiB"]
    index = 0
    while magnitude >= 1024 and index < len(prefixes) - 1:
        magnitude /= 1024
        index += 1
    return ureg.Quantity(round(magnitude, 2), prefixes[index])
