use std::fmt;

use serde::{Deserialize, Serialize};

/// A sensed quantity of the tank environment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Level,
    Temp,
    Humidity,
    Ph,
    Behavior,
}

impl Channel {
    pub const ALL: [Channel; 5] = [
        Channel::Level,
        Channel::Temp,
        Channel::Humidity,
        Channel::Ph,
        Channel::Behavior,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Channel::Level => "level",
            Channel::Temp => "temp",
            Channel::Humidity => "humidity",
            Channel::Ph => "ph",
            Channel::Behavior => "behavior",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One value per channel.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PerChannel<T> {
    pub level: T,
    pub temp: T,
    pub humidity: T,
    pub ph: T,
    pub behavior: T,
}

impl<T> PerChannel<T> {
    pub fn from_fn(mut f: impl FnMut(Channel) -> T) -> Self {
        PerChannel {
            level: f(Channel::Level),
            temp: f(Channel::Temp),
            humidity: f(Channel::Humidity),
            ph: f(Channel::Ph),
            behavior: f(Channel::Behavior),
        }
    }

    pub fn get(&self, ch: Channel) -> &T {
        match ch {
            Channel::Level => &self.level,
            Channel::Temp => &self.temp,
            Channel::Humidity => &self.humidity,
            Channel::Ph => &self.ph,
            Channel::Behavior => &self.behavior,
        }
    }

    pub fn get_mut(&mut self, ch: Channel) -> &mut T {
        match ch {
            Channel::Level => &mut self.level,
            Channel::Temp => &mut self.temp,
            Channel::Humidity => &mut self.humidity,
            Channel::Ph => &mut self.ph,
            Channel::Behavior => &mut self.behavior,
        }
    }

    pub fn map<U>(&self, mut f: impl FnMut(Channel, &T) -> U) -> PerChannel<U> {
        PerChannel::from_fn(|ch| f(ch, self.get(ch)))
    }

    pub fn iter(&self) -> impl Iterator<Item = (Channel, &T)> {
        Channel::ALL.into_iter().map(move |ch| (ch, self.get(ch)))
    }
}
