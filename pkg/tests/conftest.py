import hypothesis

# CPU-bound numeric properties blow hypothesis' default deadline; cap the
# example count instead so the suite stays quick.
hypothesis.settings.register_profile(
    "numeric", deadline=None, max_examples=25,
    suppress_health_check=[hypothesis.HealthCheck.too_slow],
)
hypothesis.settings.load_profile("numeric")
