def parse_config(path):
    """Parse a key=value config file into a dict."""
    entries = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            entries[key.strip()] = value.strip()
    return entries


def format_row(row):
    """Render one row mapping as a stable comma-separated string."""
    return ", ".join(f"{k}={v}" for k, v in sorted(row.items()))


def summarize_rows(rows):
    """Join the formatted form of every row into one summary line."""
    return "; ".join(format_row(r) for r in rows)
