export type Mode = "single-light" | "environment";

export interface ViewState {
  sessionId: string | null;
  mode: Mode;
  lightIndex: number;
  lightCount: number;
  envId: string | null;
  rotation: number; // radians, normalized to [0, 2pi)
  exposure: number; // stops
  gamma: number;
  requestPending: boolean;
}

export const TWO_PI = 2 * Math.PI;
const ROTATION_SNAP = 1e-9;

export function initialState(): ViewState {
  return {
    sessionId: null,
    mode: "single-light",
    lightIndex: 0,
    lightCount: 0,
    envId: null,
    rotation: 0,
    exposure: 0,
    gamma: 2.2,
    requestPending: false,
  };
}

/** Normalize an azimuth to [0, 2pi), snapping within 1e-9 of a full turn to 0. */
export function normalizeRotation(angle: number): number {
  if (!Number.isFinite(angle)) return 0;
  let a = angle % TWO_PI;
  if (a < 0) a += TWO_PI;
  if (a <= ROTATION_SNAP || TWO_PI - a <= ROTATION_SNAP) return 0;
  return a;
}

/** Arrow-key navigation: step the selected light index modulo the rig size. */
export function cycleLight(index: number, count: number, step: number): number {
  if (count < 1) return 0;
  return ((index + step) % count + count) % count;
}
