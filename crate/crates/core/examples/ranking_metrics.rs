//! Selects relevant documents from published attention masses and scores a
//! ranking with Pre@k and Rec@k.
//!
//! Run with `cargo run --example ranking_metrics`.

use chrono::NaiveDate;
use msin::eval::{movement_metrics, per_k_metrics, select_relevant, DayRanking};

fn main() -> anyhow::Result<()> {
    // masses of 13 headlines on 2013-01-22
    let jan22 = [0.00, 0.15, 0.03, 0.21, 0.09, 0.03, 0.04, 0.02, 0.03, 0.01, 0.00, 0.01, 0.40];
    let picked: Vec<usize> = select_relevant(&jan22).iter().map(|j| j + 1).collect();
    println!("2013-01-22 selected documents {picked:?}");

    let d = |day| NaiveDate::from_ymd_opt(2013, 1, day).unwrap();
    let days = vec![
        DayRanking::new(d(2), vec![0.5, 0.3, 0.2], vec![1])?,
        DayRanking::new(d(3), vec![0.1, 0.2, 0.3, 0.4], vec![3, 0])?,
        DayRanking::new(d(4), vec![0.6, 0.4], vec![])?,
    ];
    for m in per_k_metrics(&days, 3)? {
        println!("k={} Pre {:.3} Rec {:.3}", m.k, m.pre, m.rec);
    }

    let mv = movement_metrics(&[true, true, false, true], &[true, false, false, true])?;
    println!("movement accuracy {:.2}, up precision {:?}", mv.accuracy, mv.up.precision);
    Ok(())
}
