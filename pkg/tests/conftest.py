from hypothesis import settings

# Stack tests share the machine with live asyncio servers; a single slow
# example must not fail a property run.
settings.register_profile("default", deadline=5000)
settings.load_profile("default")
