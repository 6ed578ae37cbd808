//! JSON-line logs on stderr, filtered by `BOXSEG_LOG` (env_logger syntax,
//! default `warn`).

use std::io::Write;

use env_logger::{Builder, Env};

pub fn init() {
    Builder::from_env(Env::new().filter_or("BOXSEG_LOG", "warn"))
        .format(|buf, record| {
            let line = serde_json::json!({
                "level": record.level().as_str(),
                "target": record.target(),
                "msg": record.args().to_string(),
            });
            writeln!(buf, "{line}")
        })
        .init();
}
