//! Falling-box game: a bar at the bottom of the field moves left/right to
//! catch boxes that fall from random positions at the top.
//!
//! Coordinates: x grows rightwards, y grows downwards; `bar_x` and `box_x`
//! are centres, `box_y` is the top edge of the box.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::EngineError;
use crate::dataset::ClassLabel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameConfig {
    pub field_width: f64,
    pub field_height: f64,
    pub bar_width: f64,
    pub bar_height: f64,
    pub bar_speed: f64,
    pub box_size: f64,
    pub box_speed: f64,
    pub tick_hz: f64,
}

impl Default for GameConfig {
    fn default() -> Self {
        Self {
            field_width: 800.0,
            field_height: 600.0,
            bar_width: 150.0,
            bar_height: 20.0,
            bar_speed: 300.0,
            box_size: 40.0,
            box_speed: 150.0,
            tick_hz: 60.0,
        }
    }
}

impl GameConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let all = [
            self.field_width,
            self.field_height,
            self.bar_width,
            self.bar_height,
            self.bar_speed,
            self.box_size,
            self.box_speed,
            self.tick_hz,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(EngineError::InvalidConfig("game dimensions must be positive".into()));
        }
        if self.bar_width >= self.field_width || self.box_size >= self.field_width {
            return Err(EngineError::InvalidConfig("bar and box must fit in the field".into()));
        }
        if self.bar_height + self.box_size >= self.field_height {
            return Err(EngineError::InvalidConfig("field too short".into()));
        }
        Ok(())
    }

    /// y of the bar's top edge.
    pub fn bar_top(&self) -> f64 {
        self.field_height - self.bar_height
    }

    pub fn tick_dt(&self) -> f64 {
        1.0 / self.tick_hz
    }

    /// Horizontal centre distance below which box and bar overlap.
    pub fn catch_reach(&self) -> f64 {
        (self.bar_width + self.box_size) / 2.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CommandSource {
    Keys,
    Model,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Command {
    pub class: ClassLabel,
    pub source: CommandSource,
}

impl Command {
    pub fn keys(class: ClassLabel) -> Self {
        Self {
            class,
            source: CommandSource::Keys,
        }
    }

    pub fn model(class: ClassLabel) -> Self {
        Self {
            class,
            source: CommandSource::Model,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameState {
    pub bar_x: f64,
    pub box_x: f64,
    pub box_y: f64,
    pub score: u32,
    pub misses: u32,
    pub streak: u32,
    pub max_streak: u32,
    /// Boxes spawned after the first.
    pub respawns: u32,
    pub t: f64,
}

fn spawn_x(cfg: &GameConfig, rng: &mut impl Rng) -> f64 {
    let half = cfg.box_size / 2.0;
    rng.random_range(half..=cfg.field_width - half)
}

impl GameState {
    /// Bar centred, first box at a random x at the top.
    pub fn new(cfg: &GameConfig, rng: &mut impl Rng) -> Self {
        Self::with_box(cfg, spawn_x(cfg, rng))
    }

    pub fn with_box(cfg: &GameConfig, box_x: f64) -> Self {
        Self {
            bar_x: cfg.field_width / 2.0,
            box_x,
            box_y: 0.0,
            score: 0,
            misses: 0,
            streak: 0,
            max_streak: 0,
            respawns: 0,
            t: 0.0,
        }
    }
}

/// Advances the game by `dt` seconds under `cmd`.
///
/// Left/right move the bar at `bar_speed`, clamped to the field; none and
/// both leave it in place. The box falls at `box_speed`. A catch is scored
/// in the step where the box bottom reaches the bar top while the two
/// overlap horizontally; a box whose bottom reaches the field floor is a
/// miss. Either outcome respawns the box at a uniform-random x.
pub fn game_step(state: &GameState, cfg: &GameConfig, cmd: Command, dt: f64, rng: &mut impl Rng) -> GameState {
    let mut s = state.clone();
    if !(dt > 0.0) {
        return s;
    }
    let half_bar = cfg.bar_width / 2.0;
    let dx = match cmd.class {
        ClassLabel::Left => -cfg.bar_speed * dt,
        ClassLabel::Right => cfg.bar_speed * dt,
        ClassLabel::None | ClassLabel::Both => 0.0,
    };
    s.bar_x = (s.bar_x + dx).clamp(half_bar, cfg.field_width - half_bar);

    let bar_top = cfg.bar_top();
    let prev_bottom = s.box_y + cfg.box_size;
    s.box_y += cfg.box_speed * dt;
    let bottom = s.box_y + cfg.box_size;
    s.t += dt;

    let crossed_bar = prev_bottom < bar_top && bottom >= bar_top;
    if crossed_bar && (s.box_x - s.bar_x).abs() < cfg.catch_reach() {
        s.score += 1;
        s.streak += 1;
        s.max_streak = s.max_streak.max(s.streak);
        respawn(&mut s, cfg, rng);
    } else if bottom >= cfg.field_height {
        s.misses += 1;
        s.streak = 0;
        respawn(&mut s, cfg, rng);
    } else {
        s.box_y = s.box_y.min(cfg.field_height - cfg.box_size);
    }
    s
}

fn respawn(s: &mut GameState, cfg: &GameConfig, rng: &mut impl Rng) {
    s.box_x = spawn_x(cfg, rng);
    s.box_y = 0.0;
    s.respawns += 1;
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run(cfg: &GameConfig, s: &GameState, cmd: ClassLabel, secs: f64, rng: &mut ChaCha8Rng) -> GameState {
        let mut s = s.clone();
        let steps = (secs * cfg.tick_hz).round() as usize;
        for _ in 0..steps {
            s = game_step(&s, cfg, Command::keys(cmd), cfg.tick_dt(), rng);
        }
        s
    }

    #[test]
    fn box_far_from_bar_is_missed() {
        let cfg = GameConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = GameState::with_box(&cfg, 50.0);
        // 560 units at 150/s = 3.733 s to the floor.
        let before = run(&cfg, &s, ClassLabel::None, 3.7, &mut rng);
        assert_eq!((before.score, before.misses), (0, 0));
        let after = run(&cfg, &before, ClassLabel::None, 0.1, &mut rng);
        assert_eq!((after.score, after.misses, after.streak), (0, 1, 0));
        assert_eq!(after.respawns, 1);
    }

    #[test]
    fn box_above_centred_bar_is_caught_on_schedule() {
        let cfg = GameConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = GameState::with_box(&cfg, 400.0);
        // Bottom starts at 40 and must reach 580: 540 / 150 = 3.6 s.
        let catch_t = (cfg.bar_top() - cfg.box_size) / cfg.box_speed;
        assert!((catch_t - 3.6).abs() < 1e-12);
        let before = run(&cfg, &s, ClassLabel::None, 3.6 - 2.0 / 60.0, &mut rng);
        assert_eq!(before.score, 0);
        let after = run(&cfg, &before, ClassLabel::None, 2.0 / 60.0, &mut rng);
        assert_eq!((after.score, after.streak, after.max_streak), (1, 1, 1));
        assert_eq!(after.box_y, 0.0);
    }

    #[test]
    fn both_and_none_hold_the_bar() {
        let cfg = GameConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = GameState::new(&cfg, &mut rng);
        for cmd in [ClassLabel::Both, ClassLabel::None] {
            for dt in [1e-3, 0.1, 2.5] {
                assert_eq!(game_step(&s, &cfg, Command::keys(cmd), dt, &mut rng).bar_x, s.bar_x);
            }
        }
        let left = game_step(&s, &cfg, Command::keys(ClassLabel::Left), 10.0, &mut rng);
        assert_eq!(left.bar_x, 75.0);
        let right = game_step(&s, &cfg, Command::model(ClassLabel::Right), 10.0, &mut rng);
        assert_eq!(right.bar_x, 725.0);
    }

    #[test]
    fn default_config_is_valid() {
        GameConfig::default().validate().unwrap();
        let bad = GameConfig {
            bar_width: 900.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn trajectories_are_deterministic_and_conserve(seed in any::<u64>(), cmds in proptest::collection::vec(0usize..4, 1..600)) {
            let cfg = GameConfig::default();
            let play = || {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut s = GameState::new(&cfg, &mut rng);
                let mut traj = Vec::new();
                let mut peak = 0;
                for &c in &cmds {
                    let prev = s.clone();
                    s = game_step(&s, &cfg, Command::keys(ClassLabel::from_index(c).unwrap()), cfg.tick_dt(), &mut rng);
                    if s.misses > prev.misses {
                        assert_eq!(s.streak, 0);
                    } else if s.score == prev.score {
                        assert_eq!(s.streak, prev.streak);
                    }
                    peak = peak.max(s.streak);
                    assert!(s.bar_x >= cfg.bar_width / 2.0 && s.bar_x <= cfg.field_width - cfg.bar_width / 2.0);
                    assert!(s.box_y >= 0.0 && s.box_y <= cfg.field_height);
                    traj.push(s.clone());
                }
                assert_eq!(s.score + s.misses, s.respawns);
                assert!(s.max_streak >= peak);
                traj
            };
            prop_assert_eq!(play(), play());
        }
    }
}
