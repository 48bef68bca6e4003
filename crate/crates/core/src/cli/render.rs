//! Static SVG rendering of an episode log: lanes, agent boxes over time,
//! the ego path, and the planning geometry at one chosen step.

use std::fmt::Write as _;
use std::path::Path;

use super::CliError;
use crate::geom::Vec2;
use crate::simloop::EpisodeLog;
use crate::world::Scenario;

fn fmt(v: f64) -> String {
    format!("{:.2}", v)
}

struct SvgBuilder {
    body: String,
    min: Vec2,
    max: Vec2,
}

impl SvgBuilder {
    fn new() -> Self {
        Self {
            body: String::new(),
            min: Vec2::new(f64::INFINITY, f64::INFINITY),
            max: Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY),
        }
    }

    fn cover(&mut self, p: Vec2) {
        self.min.x = self.min.x.min(p.x);
        self.min.y = self.min.y.min(p.y);
        self.max.x = self.max.x.max(p.x);
        self.max.y = self.max.y.max(p.y);
    }

    // world y is left-positive; SVG y grows downward
    fn pt(&self, p: Vec2) -> (f64, f64) {
        (p.x, -p.y)
    }

    fn polyline(&mut self, points: &[Vec2], style: &str) {
        if points.len() < 2 {
            return;
        }
        for &p in points {
            self.cover(p);
        }
        let coords: Vec<String> = points
            .iter()
            .map(|&p| {
                let (x, y) = self.pt(p);
                format!("{},{}", fmt(x), fmt(y))
            })
            .collect();
        let _ = writeln!(
            self.body,
            "  <polyline points=\"{}\" style=\"{}\" fill=\"none\"/>",
            coords.join(" "),
            style
        );
    }

    fn box_at(&mut self, center: Vec2, heading: f64, length: f64, width: f64, style: &str) {
        let axis_l = Vec2::new(heading.cos(), heading.sin()) * (length / 2.0);
        let axis_w = Vec2::new(-heading.sin(), heading.cos()) * (width / 2.0);
        let corners = [
            center + axis_l + axis_w,
            center + axis_l - axis_w,
            center - axis_l - axis_w,
            center - axis_l + axis_w,
        ];
        for &c in &corners {
            self.cover(c);
        }
        let coords: Vec<String> = corners
            .iter()
            .map(|&p| {
                let (x, y) = self.pt(p);
                format!("{},{}", fmt(x), fmt(y))
            })
            .collect();
        let _ = writeln!(
            self.body,
            "  <polygon points=\"{}\" style=\"{}\"/>",
            coords.join(" "),
            style
        );
    }

    fn finish(self, metadata: &str) -> String {
        let margin = 5.0;
        let min_x = self.min.x - margin;
        let min_y = -self.max.y - margin;
        let w = (self.max.x - self.min.x) + 2.0 * margin;
        let h = (self.max.y - self.min.y) + 2.0 * margin;
        format!(
            "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"{} {} {} {}\">\n  <metadata>{}</metadata>\n{}</svg>\n",
            fmt(min_x),
            fmt(min_y),
            fmt(w.max(1.0)),
            fmt(h.max(1.0)),
            metadata,
            self.body
        )
    }
}

/// Render an episode over its scenario. `step` picks the planning instant
/// whose trajectory and proposals are drawn; it defaults to the middle step.
pub fn render_episode(
    log: &EpisodeLog,
    scenario: &Scenario,
    step: Option<usize>,
) -> Result<String, CliError> {
    let mut svg = SvgBuilder::new();

    // lanes: corridor band plus dashed centerline
    for lane in &scenario.lanes {
        svg.polyline(
            &lane.centerline,
            &format!(
                "stroke:#d8d8d8;stroke-width:{};stroke-linecap:round",
                fmt(lane.width)
            ),
        );
        svg.polyline(
            &lane.centerline,
            "stroke:#aaaaaa;stroke-width:0.15;stroke-dasharray:2 2",
        );
    }

    // agent boxes over time, fading with age; every half second
    let stride = 5usize;
    let n_steps = log.steps.len();
    for (k, s) in log.steps.iter().enumerate().step_by(stride) {
        let age = 1.0 - k as f64 / n_steps.max(1) as f64;
        let opacity = 0.15 + 0.5 * (1.0 - age);
        for a in &s.world.agents {
            svg.box_at(
                a.state.position(),
                a.state.heading,
                a.length,
                a.width,
                &format!("fill:#e08080;fill-opacity:{:.2};stroke:none", opacity * 0.6),
            );
        }
    }

    // ego path
    let ego_path: Vec<Vec2> = log.steps.iter().map(|s| s.world.ego.position()).collect();
    svg.polyline(&ego_path, "stroke:#2060c0;stroke-width:0.4");

    // planning geometry at the chosen step
    let chosen = step.unwrap_or(n_steps / 2).min(n_steps.saturating_sub(1));
    if let Some(record) = log.steps.get(chosen) {
        if let Some(diag) = &record.diagnostics {
            let ego = record.world.ego;
            for (idx, path) in diag.proposal_paths.iter().enumerate() {
                let world_path: Vec<Vec2> = path
                    .iter()
                    .map(|&(x, y)| ego.to_world_frame(Vec2::new(x, y)))
                    .collect();
                let highlighted = Some(idx) == diag.proposal_near_traj;
                let style = if highlighted {
                    "stroke:#109030;stroke-width:0.35"
                } else {
                    "stroke:#90c090;stroke-width:0.2;stroke-opacity:0.7"
                };
                svg.polyline(&world_path, style);
            }
            let planned: Vec<Vec2> = diag
                .trajectory
                .waypoints
                .iter()
                .map(|w| ego.to_world_frame(w.position()))
                .collect();
            svg.polyline(&planned, "stroke:#f0a000;stroke-width:0.35");
        }
        svg.box_at(
            record.world.ego.position(),
            record.world.ego.heading,
            4.6,
            1.9,
            "fill:none;stroke:#2060c0;stroke-width:0.25",
        );
    }

    // goal circle drawn as a square marker to keep the element set small
    svg.box_at(
        scenario.goal.position(),
        0.0,
        scenario.goal.radius * 2.0,
        scenario.goal.radius * 2.0,
        "fill:none;stroke:#30a030;stroke-width:0.3;stroke-dasharray:1 1",
    );

    let metadata = format!(
        "scenario={} mode={} seed={} config_hash={}",
        log.scenario_id, log.mode, log.seed, log.config_hash
    );
    Ok(svg.finish(&metadata))
}

/// Render to a file.
pub fn cmd_render(
    log_path: &Path,
    scenario: &Scenario,
    out_path: &Path,
    step: Option<usize>,
) -> Result<(), CliError> {
    let log = crate::simloop::load_episode_log(log_path)?;
    let svg = render_episode(&log, scenario, step)?;
    std::fs::write(out_path, svg)?;
    Ok(())
}
