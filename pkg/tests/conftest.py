from hypothesis import settings

# property tests share time with real training runs; wall-clock deadlines
# only add flakiness there
settings.register_profile("tmlab", deadline=None)
settings.load_profile("tmlab")
