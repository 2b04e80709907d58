//! Pulls `--<config field> <value>` pairs out of the argument list before
//! clap sees it.

use tksg_core::config::RunConfig;

fn config_fields() -> Vec<String> {
    let v = serde_json::to_value(RunConfig::default()).expect("config serializes");
    v.as_object().expect("object").keys().cloned().collect()
}

/// Splits argv into clap arguments and configuration overrides. Both
/// `--field value` and `--field=value` are accepted; dashes in the field
/// name may stand for underscores.
pub fn split_args(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let fields = config_fields();
    let mut rest = Vec::with_capacity(args.len());
    let mut pairs = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--") else {
            rest.push(a);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n.replace('-', "_"), Some(v.to_string())),
            None => (flag.replace('-', "_"), None),
        };
        if name == "config" || !fields.contains(&name) {
            rest.push(a);
            continue;
        }
        match inline.or_else(|| it.next()) {
            Some(v) => pairs.push((name, v)),
            None => rest.push(a),
        }
    }
    (rest, pairs)
}
