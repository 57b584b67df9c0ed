//! The full acceptance suite: one line per criterion, nonzero exit on failure.

use std::process::ExitCode;

use dualfilter::acceptance::{run_suite, Profile, DEFAULT_SEED};
use dualfilter::config::Tolerances;

fn main() -> ExitCode {
    let profile = match std::env::var("DUALFILTER_ACCEPTANCE_PROFILE").as_deref() {
        Ok("quick") => Profile::Quick,
        _ => Profile::Full,
    };
    let report = match run_suite(profile, &Tolerances::default(), DEFAULT_SEED, 0, |c, elapsed| {
        println!("{}", c.line(elapsed));
    }) {
        Ok(r) => r,
        Err(e) => {
            println!("acceptance suite aborted: {e}");
            return ExitCode::FAILURE;
        }
    };
    if report.pass {
        println!("acceptance: all {} criteria passed", report.criteria.len());
        ExitCode::SUCCESS
    } else {
        println!("acceptance: criteria {:?} failed", report.failed());
        ExitCode::FAILURE
    }
}
