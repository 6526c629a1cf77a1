//! The submit status stream.
//!
//! ```text
//! STATUS t=0 attempt=1 state=ALLOCATING changes=ps/0:REQUESTED,worker/0:REQUESTED
//! LOG: worker/0 /tmp/job/logs/1/worker-0.log
//! UI: http://127.0.0.1:40123
//! ```
//!
//! A `STATUS` line is printed whenever the job state, the attempt or any task
//! status changes; `changes` lists the tasks whose status moved. `UI:` and
//! each task's `LOG:` line are printed once, when first known.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, Write};

use crate::master::Master;
use crate::model::{JobState, TaskId, TaskStatus};

pub struct StatusPrinter<W: Write> {
    out: W,
    last: Option<(JobState, u32)>,
    tasks: BTreeMap<TaskId, TaskStatus>,
    ui_printed: bool,
    logs_printed: BTreeSet<TaskId>,
}

impl<W: Write> StatusPrinter<W> {
    pub fn new(out: W) -> Self {
        StatusPrinter {
            out,
            last: None,
            tasks: BTreeMap::new(),
            ui_printed: false,
            logs_printed: BTreeSet::new(),
        }
    }

    pub fn into_inner(self) -> W {
        self.out
    }

    pub fn observe(&mut self, now: u64, master: &Master) -> io::Result<()> {
        let snap = master.status();
        let mut changes = Vec::new();
        for (task, status, _) in &snap.tasks {
            if self.tasks.get(task) != Some(status) {
                changes.push(format!("{task}:{status}"));
                self.tasks.insert(task.clone(), *status);
            }
        }
        let head = (snap.state, snap.attempt);
        if self.last != Some(head) || !changes.is_empty() {
            self.last = Some(head);
            let changes = if changes.is_empty() {
                "-".to_string()
            } else {
                changes.join(",")
            };
            writeln!(
                self.out,
                "STATUS t={now} attempt={} state={} changes={changes}",
                snap.attempt, snap.state
            )?;
        }
        for (task, link) in &snap.log_links {
            if self.logs_printed.insert(task.clone()) {
                writeln!(self.out, "LOG: {task} {link}")?;
            }
        }
        if let (false, Some(url)) = (self.ui_printed, &snap.ui_url) {
            self.ui_printed = true;
            writeln!(self.out, "UI: {url}")?;
        }
        self.out.flush()
    }
}
