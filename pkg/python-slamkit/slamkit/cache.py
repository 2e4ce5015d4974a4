from functools import wraps


def readonly_array_cache(f):
    """ Caches a numpy-array property on the instance the first time it is read and flags it read-only.
    Only use it on objects that are never mutated after construction (cameras). """

    @wraps(f)
    def inner(self):
        property_cache = "_cache_" + f.__name__
        if not hasattr(self, property_cache):
            value = f(self)
            value.setflags(write=False)
            object.__setattr__(self, property_cache, value)
        return getattr(self, property_cache)

    return property(inner)
